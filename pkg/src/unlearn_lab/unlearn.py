"""IMU and baseline unlearning methods acting on the softmax head only."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit, logsumexp

from . import kernels
from .errors import ParameterError
from .influence import (
    DEFAULT_DAMPING,
    DEFAULT_PERCENTILE,
    InfluenceReport,
    build_hessian,
    influence_report,
)
from .metrics import EvalReport, accuracy
from .model_core import ClassifierState, TrainConfig, augment, train_classifier

log = logging.getLogger(__name__)

METHODS = ("imu", "ga", "rl", "npo", "simnpo", "newton", "retrain")
PROB_FLOOR = 1e-12


@dataclass
class UnlearnConfig:
    method: str = "imu"
    learning_rate: float = 0.5
    epochs: int = 100
    # 0: influence computed once, k: recomputed every k epochs
    update_frequency: int = 0
    top_ratio: float = 1.0
    beta: float = 1.0
    l1_strength: float = 0.0
    percentile: float = DEFAULT_PERCENTILE
    damping: float = DEFAULT_DAMPING
    rng_seed: int = 0
    # "influence" or "uniform" (the latter turns IMU into GA)
    weighting: str = "influence"
    # stop as soon as forget accuracy <= this value (None: run all epochs)
    stop_forget_acc: float | None = None
    batch_size: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown method {self.method!r}; valid: {', '.join(METHODS)}")
        if not self.learning_rate >= 0:
            raise ParameterError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ParameterError("epochs must be >= 1")
        if self.update_frequency < 0:
            raise ParameterError("update_frequency must be >= 0")
        if not 0 < self.top_ratio <= 1:
            raise ParameterError("top_ratio must lie in (0, 1]")
        if self.method in ("npo", "simnpo") and not self.beta > 0:
            raise ParameterError("beta must be > 0")
        if self.l1_strength < 0:
            raise ParameterError("l1_strength must be >= 0")
        if self.weighting not in ("influence", "uniform"):
            raise ParameterError("weighting must be 'influence' or 'uniform'")
        if self.batch_size is not None and self.batch_size < 1:
            raise ParameterError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class UnlearnRun:
    method: str
    initial: ClassifierState
    final: ClassifierState
    per_epoch: list[EvalReport]
    forget_acc: list[float]
    wall_clock_seconds: float
    per_epoch_weights: list[np.ndarray] | None = None
    influence: list[InfluenceReport] = field(default_factory=list)
    diverged: bool = False
    warnings: list[str] = field(default_factory=list)
    trajectory: list[np.ndarray] = field(default_factory=list)

    @property
    def epochs_run(self) -> int:
        return len(self.forget_acc)


# ----------------------------------------------------------------- gradients


def weighted_loss_grad(theta, Za, y, w):
    """Gradient of ``sum_i w_i * CE_i`` with respect to theta."""
    return kernels.weighted_ce_grad(theta, Za, y, np.ascontiguousarray(w, dtype=np.float64))[0]


def _label_probs(theta, Za, y):
    P = kernels.softmax_probs(theta, Za)
    return P, P[np.arange(len(y)), y]


def _label_logprobs(theta, Za, y):
    """Probabilities and exact ``log pi_theta(y)`` from the logits (no flooring needed)."""
    logits = Za @ theta.T
    lse = logsumexp(logits, axis=1)
    P = np.exp(logits - lse[:, None])
    return P, logits[np.arange(len(y)), y] - lse


def _log_ref(pi_ref):
    # only the reference can hit zero; floor it so the ratio stays finite
    return np.log(np.maximum(pi_ref, PROB_FLOOR))


def npo_weights(pi, pi_ref, beta: float) -> np.ndarray:
    """Adaptive smoothing weight ``2 pi^b / (pi^b + pi_ref^b)``, computed in log space."""
    lp = np.log(np.maximum(pi, PROB_FLOOR))
    return 2.0 * expit(beta * (lp - _log_ref(pi_ref)))


def npo_loss(theta, Za, y, pi_ref, beta: float) -> float:
    _, lp = _label_logprobs(theta, Za, y)
    u = beta * (lp - _log_ref(pi_ref))
    return float((2.0 / beta) * np.mean(np.logaddexp(0.0, u)))


def npo_grad_weighted(theta, Za, y, pi_ref, beta: float) -> np.ndarray:
    """NPO gradient as ``-mean(W * grad CE)``."""
    _, lp = _label_logprobs(theta, Za, y)
    W = 2.0 * expit(beta * (lp - _log_ref(pi_ref)))
    return -weighted_loss_grad(theta, Za, y, W / len(y))


def npo_grad_chain(theta, Za, y, pi_ref, beta: float) -> np.ndarray:
    """NPO gradient by the chain rule through the logits (independent of the W form)."""
    P, lp = _label_logprobs(theta, Za, y)
    u = beta * (lp - _log_ref(pi_ref))
    # d/du of (2/b) softplus(u), times du/dlog(pi) = b
    dl_dlogpi = 2.0 * 0.5 * (1.0 + np.tanh(0.5 * u))
    dlogpi_dlogits = -P
    dlogpi_dlogits[np.arange(len(y)), y] += 1.0
    return (dl_dlogpi[:, None] * dlogpi_dlogits).T @ Za / len(y)


# --------------------------------------------------------------------- loop


def _descend(cls0, Zf, yf, cfg, grad_fn, evaluator=None, on_epoch=None, record_trajectory=False):
    """Shared epoch loop: ``theta <- theta - eta * (grad + alpha * sign(theta))``."""
    Za = augment(Zf)
    yf = np.asarray(yf, dtype=np.int64)
    theta = cls0.theta.copy()
    last_good = theta
    m = len(yf)
    rng = np.random.default_rng(cfg.rng_seed)
    reports, facc, traj = [], [], []
    diverged = False
    compute = 0.0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        if on_epoch is not None:
            on_epoch(epoch, theta)
        if cfg.batch_size is None or cfg.batch_size >= m:
            batches = [np.arange(m)]
        else:
            perm = rng.permutation(m)
            batches = [perm[i:i + cfg.batch_size] for i in range(0, m, cfg.batch_size)]
        # overflow is caught by the finiteness check below
        with np.errstate(over="ignore", invalid="ignore"):
            for idx in batches:
                g = grad_fn(theta, Za, yf, idx)
                if cfg.l1_strength:
                    g = g + cfg.l1_strength * np.sign(theta)
                theta = theta - cfg.learning_rate * g
            finite = bool(np.isfinite(theta).all()) and np.isfinite(_forget_losses(theta, Za, yf)).all()
        compute += time.perf_counter() - t0
        if not finite:
            diverged = True
            log.warning("%s diverged at epoch %d", cfg.method, epoch)
            break
        last_good = theta
        state = ClassifierState.from_theta(theta, cls0.extractor)
        if record_trajectory:
            traj.append(theta.copy())
        facc.append(accuracy(state, Zf, yf))
        if evaluator is not None:
            reports.append(evaluator(state, compute))
        if cfg.stop_forget_acc is not None and facc[-1] <= cfg.stop_forget_acc:
            break
    final = ClassifierState.from_theta(last_good, cls0.extractor)
    return final, reports, facc, compute, diverged, traj


def _forget_losses(theta, Za, y):
    L = Za @ theta.T
    return logsumexp(L, axis=1) - L[np.arange(len(y)), y]


def _batch_scale(idx, m):
    return m / len(idx)


def run_imu(cls0, Zf, yf, cfg: UnlearnConfig, evaluator=None, record_trajectory=False) -> UnlearnRun:
    """Influence-guided unlearning.

    On scheduled epochs the influence of every forget sample is recomputed at the
    current parameters; samples with negative influence (optionally only the top
    ``r`` fraction) get weights proportional to the clipped root magnitude, and
    the head ascends the weighted forget loss.
    """
    yf = np.asarray(yf, dtype=np.int64)
    m = len(yf)
    if m == 0:
        raise ParameterError("forget set is empty")
    state = {"w": None}
    reports: list[InfluenceReport] = []
    weights_log: list[np.ndarray] = []
    warnings: list[str] = []

    def refresh(epoch, theta):
        due = state["w"] is None or (cfg.update_frequency > 0 and epoch % cfg.update_frequency == 0)
        if due:
            if cfg.weighting == "uniform":
                state["w"] = np.full(m, 1.0 / m)
            else:
                rep = influence_report(
                    ClassifierState.from_theta(theta), Zf, yf, cfg.damping, cfg.percentile, cfg.top_ratio
                )
                if rep.fallback:
                    msg = f"epoch {epoch}: no negative influence values, using uniform weights"
                    log.warning(msg)
                    warnings.append(msg)
                reports.append(rep)
                state["w"] = rep.weights
        weights_log.append(state["w"])

    def grad(theta, Za, y, idx):
        w = np.zeros(m)
        w[idx] = state["w"][idx] * _batch_scale(idx, m)
        return -weighted_loss_grad(theta, Za, y, w)

    final, per_epoch, facc, secs, div, traj = _descend(cls0, Zf, yf, cfg, grad, evaluator, refresh, record_trajectory)
    return UnlearnRun("imu", cls0, final, per_epoch, facc, secs, weights_log, reports, div, warnings, traj)


def run_ga(cls0, Zf, yf, cfg: UnlearnConfig, evaluator=None, record_trajectory=False) -> UnlearnRun:
    """Gradient ascent on the mean forget loss."""
    m = len(yf)

    def grad(theta, Za, y, idx):
        w = np.zeros(m)
        w[idx] = 1.0 / len(idx)
        return -weighted_loss_grad(theta, Za, y, w)

    final, per_epoch, facc, secs, div, traj = _descend(cls0, Zf, yf, cfg, grad, evaluator, None, record_trajectory)
    return UnlearnRun("ga", cls0, final, per_epoch, facc, secs, diverged=div, trajectory=traj)


def random_incorrect_labels(y, n_classes: int, seed: int) -> np.ndarray:
    if n_classes < 2:
        raise ParameterError("random labels need at least two classes")
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(seed)
    return (y + rng.integers(1, n_classes, size=len(y))) % n_classes


def run_rl(cls0, Zf, yf, cfg: UnlearnConfig, evaluator=None, record_trajectory=False) -> UnlearnRun:
    """Descend CE on the forget samples relabelled to a random wrong class."""
    y_rand = random_incorrect_labels(yf, cls0.n_classes, cfg.rng_seed)
    m = len(yf)

    def grad(theta, Za, y, idx):
        w = np.zeros(m)
        w[idx] = 1.0 / len(idx)
        return weighted_loss_grad(theta, Za, y_rand, w)

    final, per_epoch, facc, secs, div, traj = _descend(cls0, Zf, yf, cfg, grad, evaluator, None, record_trajectory)
    return UnlearnRun("rl", cls0, final, per_epoch, facc, secs, diverged=div, trajectory=traj)


def run_npo(cls0, Zf, yf, cfg: UnlearnConfig, evaluator=None, reference: ClassifierState | None = None,
            record_trajectory=False) -> UnlearnRun:
    ref = reference or cls0
    Za0 = augment(Zf)
    yf = np.asarray(yf, dtype=np.int64)
    _, pi_ref = _label_probs(ref.theta, Za0, yf)
    return _run_npo_like("npo", cls0, Zf, yf, cfg, pi_ref, evaluator, record_trajectory)


def run_simnpo(cls0, Zf, yf, cfg: UnlearnConfig, evaluator=None, record_trajectory=False) -> UnlearnRun:
    """Reference-free NPO: the reference probability is fixed at 1."""
    return _run_npo_like("simnpo", cls0, Zf, yf, cfg, np.ones(len(yf)), evaluator, record_trajectory)


def _run_npo_like(name, cls0, Zf, yf, cfg, pi_ref, evaluator, record_trajectory):
    def grad(theta, Za, y, idx):
        g = npo_grad_weighted(theta, Za[idx], y[idx], pi_ref[idx], cfg.beta)
        return g

    final, per_epoch, facc, secs, div, traj = _descend(cls0, Zf, yf, cfg, grad, evaluator, None, record_trajectory)
    return UnlearnRun(name, cls0, final, per_epoch, facc, secs, diverged=div, trajectory=traj)


def newton_removal(
    cls0: ClassifierState,
    Zf,
    yf,
    n_total: int,
    damping: float = DEFAULT_DAMPING,
    l2: float = 0.0,
    hessian_Z=None,
    relative: bool = True,
) -> ClassifierState:
    """One Newton step on the retained objective, from the full-data optimum.

    The retained objective is ``(1/n_r) sum_{retain} CE + (l2/2)|theta|^2`` with
    ``n_r = n_total - m``. Its gradient at the full-data optimum is
    ``-(1/n_r) sum_f grad_i - (m/n_r) l2 theta``. The Hessian is estimated on
    ``hessian_Z`` (the forget set when omitted, i.e. retain-free mode).
    """
    yf = np.asarray(yf, dtype=np.int64)
    m = len(yf)
    if m == 0:
        return ClassifierState(cls0.weights.copy(), cls0.bias.copy(), cls0.extractor)
    n_r = n_total - m
    if n_r <= 0:
        raise ParameterError("nothing would be retained")
    theta = cls0.theta
    gsum = weighted_loss_grad(theta, augment(Zf), yf, np.ones(m)).ravel()
    rhs = gsum / n_r + (m / n_r) * l2 * theta.ravel()
    solver = build_hessian(cls0, Zf if hessian_Z is None else hessian_Z, damping, relative, l2)
    return cls0.with_flat(theta.ravel() + solver.solve(rhs))


def retrain_oracle(Z_retain, y_retain, n_classes: int, cfg: TrainConfig, extractor=None) -> ClassifierState:
    """Train from scratch on the retain set only."""
    return train_classifier(Z_retain, y_retain, n_classes, cfg, extractor=extractor).state


def run_method(cls0, Zf, yf, cfg: UnlearnConfig, evaluator=None, reference=None, record_trajectory=False) -> UnlearnRun:
    fn = {"imu": run_imu, "ga": run_ga, "rl": run_rl, "simnpo": run_simnpo}
    if cfg.method == "npo":
        return run_npo(cls0, Zf, yf, cfg, evaluator, reference, record_trajectory)
    if cfg.method in fn:
        return fn[cfg.method](cls0, Zf, yf, cfg, evaluator, record_trajectory)
    raise ParameterError(f"{cfg.method!r} is not an iterative method; use newton_removal / retrain_oracle")
