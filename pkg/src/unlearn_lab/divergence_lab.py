"""Logistic-regression replay of single-sample GA / NPO / IMU updates.

Over a replay each step picks one forget sample ``i`` and moves

    theta <- theta + eta * w_i * x_i * (2y_i - 1) * (1 - f_theta(x_i))

so ``theta_t - theta_0 = X_f^T D a`` with ``a_i`` the accumulated scalar
factors and ``D = diag(w)``. The drift measured in the ``X^T X`` norm is then
the quadratic form ``(Da)^T G (Da)`` with ``G = X_f X^T X X_f^T``, which is
sandwiched by the extreme eigenvalues of ``G``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit, log_expit

from .errors import NumericError, ParameterError
from .influence import DEFAULT_DAMPING, DEFAULT_PERCENTILE, normalize_weights, select_negative

METHODS = ("ga", "npo", "imu")
CSV_COLUMNS = ["seed", "method", "t", "direct_norm", "quadratic_norm", "lower", "upper"]
PROB_FLOOR = 1e-12


def _signed(y) -> np.ndarray:
    y = np.asarray(y)
    if not np.isin(y, (0, 1)).all():
        raise ParameterError("labels must be 0 or 1")
    return 2.0 * y - 1.0


def label_prob(theta, x, y, b: float = 0.0):
    """f_theta(x): probability the model gives the observed label."""
    s = _signed(y)
    return expit(s * (np.asarray(x) @ theta + b))


def logistic_step(theta, x, y, eta: float, w: float = 1.0, b: float = 0.0) -> np.ndarray:
    s = float(_signed(y))
    f = expit(s * (float(np.dot(theta, x)) + b))
    return theta + eta * w * s * (1.0 - f) * np.asarray(x, dtype=np.float64)


def neg_log_prob(theta, x, y, b: float = 0.0) -> float:
    s = float(_signed(y))
    return float(-log_expit(s * (float(np.dot(theta, x)) + b)))


def weighted_norm_direct(theta_t, theta0, X) -> float:
    d = np.asarray(X) @ (np.asarray(theta_t) - np.asarray(theta0))
    return float(d @ d)


def _check_symmetric(G) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    if G.ndim != 2 or G.shape[0] != G.shape[1]:
        raise ParameterError("G must be square")
    if not np.allclose(G, G.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(G).max())):
        raise ParameterError("G must be symmetric")
    return G


def weighted_norm_quadratic(a, G, D) -> float:
    """``(Da)^T G (Da)``; ``D`` is a matrix or the vector of its diagonal."""
    a = np.asarray(a, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    Da = D * a if D.ndim == 1 else D @ a
    return float(Da @ np.asarray(G) @ Da)


def eigen_bounds_check(a, G, D) -> tuple[float, float, float]:
    """Return ``(lambda_min |Da|^2, value, lambda_max |Da|^2)``."""
    G = _check_symmetric(G)
    a = np.asarray(a, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    Da = D * a if D.ndim == 1 else D @ a
    ev = np.linalg.eigvalsh(0.5 * (G + G.T))
    n2 = float(Da @ Da)
    lower, upper = float(ev[0]) * n2, float(ev[-1]) * n2
    value = float(Da @ G @ Da)
    slack = 1e-9 * max(abs(lower), abs(upper), abs(value), 1e-300)
    if not (lower - slack <= value <= upper + slack):
        raise NumericError(f"Rayleigh bounds violated: {lower} <= {value} <= {upper}")
    return lower, value, upper


def gram_matrix(X_f, X) -> np.ndarray:
    """``G_ij = x_i^T X^T X x_j`` for forget rows ``x_i``."""
    XF = np.asarray(X_f) @ np.asarray(X).T
    G = XF @ XF.T
    return 0.5 * (G + G.T)


# ------------------------------------------------------------------ weights


def npo_weights(theta, X_f, y_f, pi_ref, beta: float, b: float = 0.0) -> np.ndarray:
    pi = np.maximum(label_prob(theta, X_f, y_f, b), PROB_FLOOR)
    ref = np.maximum(pi_ref, PROB_FLOOR)
    return 2.0 / (1.0 + np.exp(-beta * (np.log(pi) - np.log(ref))))


def logistic_influence(theta, X_f, y_f, damping: float = DEFAULT_DAMPING, b: float = 0.0) -> np.ndarray:
    """``-g_bar^T H^{-1} g_i`` with the loss Hessian taken over the forget rows."""
    X_f = np.asarray(X_f, dtype=np.float64)
    s = _signed(y_f)
    p = expit(X_f @ theta + b)
    f = expit(s * (X_f @ theta + b))
    G = -(s * (1.0 - f))[:, None] * X_f
    H = (X_f * (p * (1 - p))[:, None]).T @ X_f / len(X_f)
    H += damping * max(float(np.mean(np.diag(H))), 1e-12) * np.eye(len(H))
    return -G @ np.linalg.solve(H, G.mean(axis=0))


def imu_weights(theta, X_f, y_f, damping=DEFAULT_DAMPING, percentile=DEFAULT_PERCENTILE, b=0.0) -> np.ndarray:
    raw = logistic_influence(theta, X_f, y_f, damping, b)
    sel = select_negative(raw)
    if not sel.any():
        return np.full(len(raw), 1.0 / len(raw))
    return normalize_weights(raw, percentile, sel)


# ------------------------------------------------------------------- replay


@dataclass
class ReplayState:
    theta0: np.ndarray
    theta_t: np.ndarray
    counts: np.ndarray
    a: np.ndarray
    G: np.ndarray
    weights: np.ndarray
    method: str
    # live mode: largest relative gap between direct and quadratic norm
    approx_error: float = 0.0
    history: list[tuple[int, np.ndarray, np.ndarray]] = field(default_factory=list, repr=False)

    @property
    def t(self) -> int:
        return int(self.counts.sum())


def method_weights(method, theta, X_f, y_f, pi_ref, beta, b=0.0) -> np.ndarray:
    if method == "ga":
        return np.ones(len(y_f))
    if method == "npo":
        return npo_weights(theta, X_f, y_f, pi_ref, beta, b)
    if method == "imu":
        return imu_weights(theta, X_f, y_f, b=b)
    raise ParameterError(f"unknown method {method!r}; valid: {', '.join(METHODS)}")


def replay(
    theta0,
    X_f,
    y_f,
    X,
    method: str = "ga",
    eta: float = 0.1,
    steps: int = 50,
    seed: int = 0,
    beta: float = 1.0,
    b: float = 0.0,
    mode: str = "frozen",
    record_every: int = 0,
) -> ReplayState:
    """Single-sample replay with picks drawn uniformly (with replacement) from ``seed``.

    ``mode="frozen"`` fixes the weights at ``theta0``. ``mode="live"`` recomputes
    them before every step and reports the mismatch against the closed form built
    from the mean weights in ``approx_error``.
    """
    if mode not in ("frozen", "live"):
        raise ParameterError("mode must be 'frozen' or 'live'")
    X_f = np.asarray(X_f, dtype=np.float64)
    y_f = np.asarray(y_f)
    s = _signed(y_f)
    theta0 = np.asarray(theta0, dtype=np.float64)
    n_f = len(y_f)
    rng = np.random.default_rng(seed)
    pi_ref = label_prob(theta0, X_f, y_f, b)
    w = method_weights(method, theta0, X_f, y_f, pi_ref, beta, b)
    counts = np.zeros(n_f, dtype=np.int64)
    a = np.zeros(n_f)
    # live mode tracks the applied weight*factor sum separately
    wa = np.zeros(n_f)
    theta = theta0.copy()
    hist = []
    for step in range(1, steps + 1):
        if mode == "live" and step > 1:
            w = method_weights(method, theta, X_f, y_f, pi_ref, beta, b)
        i = int(rng.integers(n_f))
        f = expit(s[i] * (float(X_f[i] @ theta) + b))
        factor = eta * s[i] * (1.0 - f)
        theta = theta + w[i] * factor * X_f[i]
        a[i] += factor
        wa[i] += w[i] * factor
        counts[i] += 1
        if record_every and step % record_every == 0:
            hist.append((step, theta.copy(), a.copy()))
    if mode == "live":
        weights = np.divide(wa, a, out=np.ones(n_f), where=a != 0)
    else:
        weights = w
    G = gram_matrix(X_f, X)
    st = ReplayState(theta0, theta, counts, a, G, weights, method, history=hist)
    if mode == "live":
        # closed form using the time-averaged weights is exact by construction;
        # the approximation is using the starting weights instead
        w0 = method_weights(method, theta0, X_f, y_f, pi_ref, beta, b)
        d = weighted_norm_direct(theta, theta0, X)
        q = weighted_norm_quadratic(a, G, w0)
        st.approx_error = abs(d - q) / max(d, 1e-300)
    return st


def fit_logistic(X, y, l2: float = 1e-2, b: float = 0.0) -> np.ndarray:
    """Penalized logistic fit with the offset ``b`` held fixed."""
    X = np.asarray(X, dtype=np.float64)
    s = _signed(y)

    def fun(th):
        m = s * (X @ th + b)
        return float(-log_expit(m).mean() + 0.5 * l2 * th @ th), -(s * expit(-m)) @ X / len(X) + l2 * th

    res = minimize(fun, np.zeros(X.shape[1]), jac=True, method="L-BFGS-B", options={"gtol": 1e-10})
    return res.x


def logistic_instance(seed: int, n: int = 60, d: int = 5, n_forget: int = 12):
    """Two Gaussian blobs, a fitted theta_0 and a random forget subset."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    mu = rng.standard_normal(d)
    X = rng.standard_normal((n, d)) * 0.8 + np.where(y[:, None] == 1, mu, -mu) / np.sqrt(d)
    theta0 = fit_logistic(X, y)
    forget = np.sort(rng.choice(n, size=n_forget, replace=False))
    return theta0, X, y, forget


def divergence_rows(seeds, methods=METHODS, eta=0.1, steps=50, record_every=10, beta=1.0, mode="frozen") -> list[dict]:
    rows = []
    for seed in seeds:
        theta0, X, y, forget = logistic_instance(seed)
        for method in methods:
            st = replay(theta0, X[forget], y[forget], X, method, eta, steps, seed, beta, mode=mode,
                        record_every=record_every)
            for t, th, a in st.history:
                lo, val, hi = eigen_bounds_check(a, st.G, st.weights)
                rows.append({
                    "seed": seed, "method": method, "t": t,
                    "direct_norm": weighted_norm_direct(th, theta0, X),
                    "quadratic_norm": val, "lower": lo, "upper": hi,
                })
    return rows


def write_divergence_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
