"""Hot numeric kernels for the softmax head.

Every kernel has a numpy implementation (``*_np``) and a numba one (``*_nb``).
The public name is bound to one of them at import time according to
``UNLEARN_LAB_JIT`` (see :mod:`unlearn_lab._jit`). Both paths are kept
importable so the test-suite can check them against each other.

Conventions: ``theta`` is ``[C, D]`` with the bias in the last column,
``Z`` is the augmented feature matrix ``[m, D]`` whose last column is 1,
``y`` holds int64 labels and ``w`` float64 per-sample weights.
"""
from __future__ import annotations

import math

import numpy as np

from ._jit import USE_NUMBA, njit


# --------------------------------------------------------------------- numpy


def softmax_probs_np(theta, Z):
    logits = Z @ theta.T
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def weighted_ce_grad_np(theta, Z, y, w):
    """Return ``(sum_i w_i grad_i, sum_i w_i loss_i)``."""
    logits = Z @ theta.T
    mx = logits.max(axis=1, keepdims=True)
    shifted = logits - mx
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(y))
    losses = lse - shifted[rows, y]
    resid = np.exp(shifted - lse[:, None])
    resid[rows, y] -= 1.0
    grad = (resid * w[:, None]).T @ Z
    return grad, float(w @ losses)


def softmax_hessian_np(theta, Z, w):
    P = softmax_probs_np(theta, Z)
    C, D = theta.shape
    A = -P[:, :, None] * P[:, None, :]
    idx = np.arange(C)
    A[:, idx, idx] += P
    H = np.einsum("n,nab,ni,nj->aibj", w, A, Z, Z, optimize=True)
    return H.reshape(C * D, C * D)


def per_sample_grads_np(theta, Z, y):
    P = softmax_probs_np(theta, Z)
    P[np.arange(len(y)), y] -= 1.0
    return (P[:, :, None] * Z[:, None, :]).reshape(len(y), -1)


# --------------------------------------------------------------------- numba


@njit
def _row_probs(theta, z, out):
    C, D = theta.shape
    mx = -np.inf
    for c in range(C):
        s = 0.0
        for j in range(D):
            s += theta[c, j] * z[j]
        out[c] = s
        if s > mx:
            mx = s
    tot = 0.0
    for c in range(C):
        out[c] = math.exp(out[c] - mx)
        tot += out[c]
    for c in range(C):
        out[c] /= tot
    return mx, tot


@njit
def softmax_probs_nb(theta, Z):
    m = Z.shape[0]
    C = theta.shape[0]
    out = np.empty((m, C))
    for i in range(m):
        _row_probs(theta, Z[i], out[i])
    return out


@njit
def weighted_ce_grad_nb(theta, Z, y, w):
    m = Z.shape[0]
    C, D = theta.shape
    grad = np.zeros((C, D))
    p = np.empty(C)
    loss = 0.0
    for i in range(m):
        wi = w[i]
        if wi == 0.0:
            continue
        mx, tot = _row_probs(theta, Z[i], p)
        ly = 0.0
        for j in range(D):
            ly += theta[y[i], j] * Z[i, j]
        loss += wi * (math.log(tot) + mx - ly)
        p[y[i]] -= 1.0
        for c in range(C):
            r = wi * p[c]
            for j in range(D):
                grad[c, j] += r * Z[i, j]
    return grad, loss


@njit
def softmax_hessian_nb(theta, Z, w):
    m = Z.shape[0]
    C, D = theta.shape
    P = C * D
    H = np.zeros((P, P))
    p = np.empty(C)
    zz = np.empty((D, D))
    for n in range(m):
        _row_probs(theta, Z[n], p)
        wn = w[n]
        for i in range(D):
            for j in range(D):
                zz[i, j] = wn * Z[n, i] * Z[n, j]
        for a in range(C):
            for b in range(C):
                acoef = -p[a] * p[b]
                if a == b:
                    acoef += p[a]
                if acoef == 0.0:
                    continue
                for i in range(D):
                    row = a * D + i
                    for j in range(D):
                        H[row, b * D + j] += acoef * zz[i, j]
    return H


@njit
def per_sample_grads_nb(theta, Z, y):
    m = Z.shape[0]
    C, D = theta.shape
    out = np.empty((m, C * D))
    p = np.empty(C)
    for n in range(m):
        _row_probs(theta, Z[n], p)
        p[y[n]] -= 1.0
        for c in range(C):
            for j in range(D):
                out[n, c * D + j] = p[c] * Z[n, j]
    return out


# ------------------------------------------------------------------ dispatch

if USE_NUMBA:
    softmax_probs = softmax_probs_nb
    weighted_ce_grad = weighted_ce_grad_nb
    softmax_hessian = softmax_hessian_nb
    per_sample_grads = per_sample_grads_nb
else:
    softmax_probs = softmax_probs_np
    weighted_ce_grad = weighted_ce_grad_np
    softmax_hessian = softmax_hessian_np
    per_sample_grads = per_sample_grads_np

BACKEND = "numba" if USE_NUMBA else "numpy"
