"""Classifier-level influence values, unlearning weights and the LOO oracle."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import scipy.linalg
from scipy.stats import spearmanr

from .errors import EmptySelectionError, NumericError, ParameterError
from .model_core import (
    ClassifierState,
    TrainConfig,
    ce_loss,
    grad_classifier,
    hessian_classifier,
    train_classifier,
)

DEFAULT_DAMPING = 1e-3
DEFAULT_PERCENTILE = 95.0


@dataclass
class InfluenceReport:
    raw: np.ndarray
    selected: np.ndarray
    weights: np.ndarray
    truncation_percentile: float
    damping_used: float
    fallback: bool = False

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "raw", "selected", "weight"])
            for i, (r, s, wt) in enumerate(zip(self.raw, self.selected, self.weights)):
                w.writerow([i, repr(float(r)), int(bool(s)), repr(float(wt))])


@dataclass
class LooRecord:
    index: int
    delta_loss: float


class HessianSolver:
    """Cholesky factorisation of a damped Hessian, shared by every solve."""

    def __init__(self, H: np.ndarray, damping: float):
        self.H = H
        self.damping = damping
        try:
            self._cho = scipy.linalg.cho_factor(H, lower=True, check_finite=True)
        except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
            raise NumericError(
                f"Hessian is not positive definite with damping lambda={damping:g}; increase lambda"
            ) from exc

    def solve(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve(self._cho, b)


def build_hessian(
    cls: ClassifierState,
    Z,
    damping: float = DEFAULT_DAMPING,
    relative: bool = True,
    l2: float = 0.0,
) -> HessianSolver:
    """Mean CE Hessian over ``Z`` + ``l2 I`` + damping, factorised.

    With ``relative=True`` the damping is ``damping * mean(diag H)``.
    """
    if damping < 0:
        raise ParameterError("damping must be >= 0")
    H = hessian_classifier(cls, Z)
    if l2:
        H[np.diag_indices_from(H)] += l2
    lam = damping * float(np.mean(np.diag(H))) if relative else damping
    if lam:
        H[np.diag_indices_from(H)] += lam
    return HessianSolver(H, lam)


def influence_self(solver: HessianSolver, g) -> np.ndarray:
    """Parameter influence ``-H^{-1} g`` of up-weighting a sample with gradient ``g``."""
    return -solver.solve(np.asarray(g, dtype=np.float64))


def influence_on_forget(
    cls: ClassifierState,
    Z_f,
    y_f,
    damping: float = DEFAULT_DAMPING,
    relative: bool = True,
    hessian_Z=None,
    l2: float = 0.0,
) -> tuple[np.ndarray, HessianSolver]:
    """``I(x, D_f) = -grad_f^T H^{-1} grad_x`` for every ``x`` in the forget set.

    ``grad_f`` is the mean per-sample gradient over the forget set. The Hessian is
    taken over the forget set unless ``hessian_Z`` supplies other rows (e.g. the
    full training set, with the training ``l2``).
    """
    Z_f = np.atleast_2d(Z_f)
    if len(Z_f) < 1:
        raise ParameterError("forget set is empty")
    G = np.atleast_2d(grad_classifier(cls, Z_f, y_f))
    solver = build_hessian(cls, Z_f if hessian_Z is None else hessian_Z, damping, relative, l2)
    v = solver.solve(G.mean(axis=0))
    return -(G @ v), solver


def select_negative(raw) -> np.ndarray:
    return np.asarray(raw) < 0


def select_top_r(raw, selected, r: float) -> np.ndarray:
    """Keep the ceil(r*k) selected entries with the largest |raw|; ties go to the lower index."""
    if not 0 < r <= 1:
        raise ParameterError("r must lie in (0, 1]")
    raw = np.asarray(raw, dtype=np.float64)
    selected = np.asarray(selected, dtype=bool)
    idx = np.flatnonzero(selected)
    k = int(np.ceil(r * len(idx) - 1e-12))
    order = idx[np.argsort(-np.abs(raw[idx]), kind="stable")]
    out = np.zeros_like(selected)
    out[order[:k]] = True
    return out


def normalize_weights(raw, q: float, selected) -> np.ndarray:
    """sqrt-magnitudes of the selected entries, clipped at their q-th percentile, summing to 1."""
    if not 0 < q <= 100:
        raise ParameterError("percentile must lie in (0, 100]")
    raw = np.asarray(raw, dtype=np.float64)
    selected = np.asarray(selected, dtype=bool)
    if not selected.any():
        raise EmptySelectionError("no selected samples to weight")
    mag = np.sqrt(np.abs(raw[selected]))
    mag = np.minimum(mag, np.percentile(mag, q))
    out = np.zeros_like(raw)
    tot = mag.sum()
    if tot > 0:
        out[selected] = mag / tot
    else:
        out[selected] = 1.0 / selected.sum()
    return out


def influence_report(
    cls: ClassifierState,
    Z_f,
    y_f,
    damping: float = DEFAULT_DAMPING,
    percentile: float = DEFAULT_PERCENTILE,
    top_ratio: float = 1.0,
    relative: bool = True,
) -> InfluenceReport:
    """Influence values, selection and weights for the forget set.

    When no sample has negative influence the weights fall back to uniform over
    the whole forget set and ``fallback`` is set.
    """
    raw, solver = influence_on_forget(cls, Z_f, y_f, damping, relative)
    sel = select_negative(raw)
    if sel.any() and top_ratio < 1:
        sel = select_top_r(raw, sel, top_ratio)
    if sel.any():
        w = normalize_weights(raw, percentile, sel)
        fallback = False
    else:
        w = np.full(len(raw), 1.0 / len(raw))
        fallback = True
    return InfluenceReport(raw, sel, w, float(percentile), solver.damping, fallback)


def forget_loss(cls: ClassifierState, Z_f, y_f) -> float:
    return float(np.mean(ce_loss(cls, np.atleast_2d(Z_f), y_f)))


def loo_oracle(
    Z_train,
    y_train,
    n_classes: int,
    forget_pos,
    probe,
    cfg: TrainConfig,
    base: ClassifierState | None = None,
) -> list[LooRecord]:
    """Retrain without each probed row and record the change of mean forget loss.

    ``forget_pos`` and ``probe`` index rows of ``Z_train``. Retraining is warm
    started from the full-data optimum, which is unique when ``cfg.l2 > 0``.
    """
    if cfg.l2 <= 0:
        raise ParameterError("LOO oracle needs a strictly convex problem (l2 > 0)")
    Z_train = np.asarray(Z_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    forget_pos = np.asarray(forget_pos, dtype=np.int64)
    if base is None:
        base = train_classifier(Z_train, y_train, n_classes, cfg).state
    Zf, yf = Z_train[forget_pos], y_train[forget_pos]
    before = forget_loss(base, Zf, yf)
    out = []
    for i in np.asarray(probe, dtype=np.int64):
        keep = np.ones(len(y_train), dtype=bool)
        keep[i] = False
        st = train_classifier(Z_train[keep], y_train[keep], n_classes, cfg, init=base).state
        out.append(LooRecord(int(i), forget_loss(st, Zf, yf) - before))
    return out


def loo_agreement(influence_values, records: list[LooRecord]) -> float:
    """Spearman correlation between influence values and the LOO response.

    Influence is the derivative for *up*-weighting, while a LOO delta removes the
    sample (weight change -1/n), so the comparison uses ``-delta_loss``.
    """
    deltas = np.array([r.delta_loss for r in records])
    return float(spearmanr(np.asarray(influence_values), -deltas)[0])
