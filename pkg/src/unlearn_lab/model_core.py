"""Frozen feature extractor + softmax head, with closed-form derivatives.

The head is parameterised by ``theta = [W | b]`` of shape ``[C, d_feat + 1]``;
flattened vectors are row-major, i.e. index ``c * (d_feat + 1) + j``. The bias
is the coefficient of a constant feature 1 appended to every ``z``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import NumericError, ParameterError, TrainingError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExtractorSpec:
    kind: str
    d_in: int
    d_feat: int
    seed: int | None = None
    projection: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind == "identity":
            if self.d_feat != self.d_in:
                raise ParameterError("identity extractor requires d_feat == d_in")
        elif self.kind == "random_relu":
            if self.projection is None:
                rng = np.random.default_rng(self.seed)
                P = rng.standard_normal((self.d_feat, self.d_in)) / np.sqrt(self.d_in)
                object.__setattr__(self, "projection", P)
            P = np.array(self.projection, dtype=np.float64)
            if P.shape != (self.d_feat, self.d_in):
                raise ParameterError(f"projection must be {(self.d_feat, self.d_in)}, got {P.shape}")
            P.setflags(write=False)
            object.__setattr__(self, "projection", P)
        else:
            raise ParameterError(f"unknown extractor kind {self.kind!r}")

    @classmethod
    def identity(cls, d: int) -> "ExtractorSpec":
        return cls("identity", d, d)

    @classmethod
    def random_relu(cls, d_in: int, d_feat: int, seed: int) -> "ExtractorSpec":
        return cls("random_relu", d_in, d_feat, seed)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d_in": self.d_in, "d_feat": self.d_feat, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "ExtractorSpec":
        return cls(d["kind"], int(d["d_in"]), int(d["d_feat"]), d.get("seed"))


def extract_features(spec: ExtractorSpec, x) -> np.ndarray:
    """``z = phi(x)``; accepts one vector ``[d_in]`` or a batch ``[n, d_in]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != spec.d_in:
        raise ParameterError(f"expected inputs of dim {spec.d_in}, got {x.shape[-1]}")
    if spec.kind == "identity":
        return x.copy()
    return np.maximum(0.0, x @ spec.projection.T)


def augment(Z) -> np.ndarray:
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    return np.ascontiguousarray(np.hstack([Z, np.ones((len(Z), 1))]))


@dataclass
class ClassifierState:
    weights: np.ndarray  # [C, d_feat]
    bias: np.ndarray  # [C]
    extractor: ExtractorSpec | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ParameterError("weights must be [C, d] and bias [C]")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def d_feat(self) -> int:
        return self.weights.shape[1]

    @property
    def theta(self) -> np.ndarray:
        return np.ascontiguousarray(np.hstack([self.weights, self.bias[:, None]]))

    @property
    def n_params(self) -> int:
        return self.n_classes * (self.d_feat + 1)

    def flat(self) -> np.ndarray:
        return self.theta.ravel()

    @classmethod
    def from_theta(cls, theta, extractor=None) -> "ClassifierState":
        theta = np.asarray(theta, dtype=np.float64)
        return cls(theta[:, :-1].copy(), theta[:, -1].copy(), extractor)

    def with_flat(self, vec) -> "ClassifierState":
        return ClassifierState.from_theta(np.reshape(vec, (self.n_classes, self.d_feat + 1)), self.extractor)

    @classmethod
    def zeros(cls, C: int, d_feat: int, extractor=None) -> "ClassifierState":
        return cls(np.zeros((C, d_feat)), np.zeros(C), extractor)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.weights).all() and np.isfinite(self.bias).all())

    def to_dict(self) -> dict:
        return {
            "n_classes": self.n_classes,
            "d_feat": self.d_feat,
            "weights": self.weights.ravel().tolist(),
            "bias": self.bias.tolist(),
            "extractor": self.extractor.to_dict() if self.extractor else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierState":
        W = np.asarray(d["weights"], dtype=np.float64).reshape(int(d["n_classes"]), int(d["d_feat"]))
        ext = ExtractorSpec.from_dict(d["extractor"]) if d.get("extractor") else None
        return cls(W, np.asarray(d["bias"], dtype=np.float64), ext)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ClassifierState":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrainConfig:
    # None picks 1/L from a bound on the loss curvature
    learning_rate: float | None = None
    max_epochs: int = 50_000
    tol: float = 1e-8
    l2: float = 1e-3
    # Nesterov momentum with gradient-based restarts; False gives plain descent
    accelerate: bool = True

    def __post_init__(self):
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ParameterError("learning_rate must be > 0")
        if not self.tol > 0:
            raise ParameterError("tol must be > 0")
        if self.l2 < 0:
            raise ParameterError("l2 must be >= 0")


@dataclass
class TrainResult:
    state: ClassifierState
    epochs: int
    grad_norm: float
    loss: float
    converged: bool


def _check_z(cls: ClassifierState, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != cls.d_feat:
        raise ParameterError(f"feature dim {z.shape[-1]} != classifier d_feat {cls.d_feat}")
    if not np.isfinite(z).all():
        raise NumericError("non-finite features")
    return z


def forward_probs(cls: ClassifierState, z) -> np.ndarray:
    """Softmax class probabilities for one ``z`` (returns ``[C]``) or a batch (``[m, C]``)."""
    z = _check_z(cls, z)
    P = kernels.softmax_probs_np(cls.theta, augment(z))
    return P[0] if z.ndim == 1 else P


def ce_loss(cls: ClassifierState, z, y):
    """``-log p_y``; scalar for one sample, vector for a batch."""
    z = _check_z(cls, z)
    Za = augment(z)
    yy = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if yy.min() < 0 or yy.max() >= cls.n_classes:
        raise ParameterError("label out of range")
    logits = Za @ cls.theta.T
    mx = logits.max(axis=1)
    lse = mx + np.log(np.exp(logits - mx[:, None]).sum(axis=1))
    out = lse - logits[np.arange(len(yy)), yy]
    return float(out[0]) if z.ndim == 1 else out


def grad_classifier(cls: ClassifierState, z, y) -> np.ndarray:
    """Flattened ``(p - onehot(y)) outer [z; 1]``; ``[P]`` or ``[m, P]`` for a batch."""
    z = _check_z(cls, z)
    yy = np.atleast_1d(np.asarray(y, dtype=np.int64))
    G = kernels.per_sample_grads(cls.theta, augment(z), yy)
    return G[0] if z.ndim == 1 else G


def hessian_classifier(cls: ClassifierState, Z, damping: float = 0.0) -> np.ndarray:
    """Mean CE Hessian over rows of ``Z`` plus ``damping * I``."""
    Z = np.atleast_2d(_check_z(cls, Z))
    if len(Z) < 1:
        raise ParameterError("need at least one sample")
    if damping < 0:
        raise ParameterError("damping must be >= 0")
    m = len(Z)
    H = kernels.softmax_hessian(cls.theta, augment(Z), np.full(m, 1.0 / m))
    H = 0.5 * (H + H.T)
    if damping:
        H[np.diag_indices_from(H)] += damping
    if not np.isfinite(H).all():
        raise NumericError("non-finite Hessian entries")
    return H


def fisher_diag(cls: ClassifierState, Z, y) -> np.ndarray:
    """Diagonal of the empirical Fisher ``mean_i g_i g_i^T``."""
    G = np.atleast_2d(grad_classifier(cls, np.atleast_2d(Z), y))
    return (G * G).mean(axis=0)


def curvature_bound(Z, l2: float, sample_weight=None) -> float:
    """Upper bound on the largest Hessian eigenvalue of the (weighted mean) regularised CE."""
    Za = augment(Z)
    w = np.full(len(Za), 1.0 / len(Za)) if sample_weight is None else np.asarray(sample_weight) / np.sum(sample_weight)
    # softmax covariance has spectral norm <= 1/2
    return 0.5 * float(np.linalg.eigvalsh((Za * w[:, None]).T @ Za)[-1]) + l2


def objective(theta, Za, y, w, l2):
    g, loss = kernels.weighted_ce_grad(theta, Za, y, w)
    return g + l2 * theta, loss + 0.5 * l2 * float(np.sum(theta * theta))


def train_classifier(
    Z,
    y,
    n_classes: int,
    cfg: TrainConfig | None = None,
    init: ClassifierState | None = None,
    extractor: ExtractorSpec | None = None,
    sample_weight=None,
) -> TrainResult:
    """Full-batch descent on mean CE + (l2/2)||theta||^2 (bias included).

    Stops when the gradient norm drops to ``cfg.tol`` or after ``cfg.max_epochs``.
    ``sample_weight`` (optional, normalised internally) replaces the uniform mean,
    which lets callers collapse duplicate rows without changing the objective.
    """
    cfg = cfg or TrainConfig()
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    y = np.ascontiguousarray(y, dtype=np.int64)
    if len(Z) == 0:
        raise ParameterError("empty training set")
    Za = augment(Z)
    if sample_weight is None:
        w = np.full(len(Za), 1.0 / len(Za))
    else:
        w = np.asarray(sample_weight, dtype=np.float64)
        w = w / w.sum()
    lr = cfg.learning_rate or 1.0 / curvature_bound(Z, cfg.l2, w)
    if init is None:
        theta = np.zeros((n_classes, Z.shape[1] + 1))
    else:
        theta = init.theta.copy()
    l2 = cfg.l2

    g, loss = objective(theta, Za, y, w, l2)
    prev = theta.copy()
    tk = 1.0
    epoch = 0
    gnorm = float(np.linalg.norm(g))
    while gnorm > cfg.tol and epoch < cfg.max_epochs:
        if cfg.accelerate:
            tn = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
            look = theta + ((tk - 1.0) / tn) * (theta - prev)
            g_look, _ = objective(look, Za, y, w, l2)
            new = look - lr * g_look
            # restart momentum when it points uphill
            if np.sum(g_look * (new - theta)) > 0:
                tn = 1.0
            tk = tn
        else:
            new = theta - lr * g
        prev, theta = theta, new
        g, loss = objective(theta, Za, y, w, l2)
        if not np.isfinite(loss):
            raise TrainingError(f"loss became non-finite at epoch {epoch}")
        gnorm = float(np.linalg.norm(g))
        epoch += 1
    converged = gnorm <= cfg.tol
    if not converged:
        log.warning("train_classifier stopped at max_epochs=%d with |g|=%.3g", cfg.max_epochs, gnorm)
    state = ClassifierState.from_theta(theta, extractor)
    return TrainResult(state, epoch, gnorm, float(loss), converged)


def predict(cls: ClassifierState, Z) -> np.ndarray:
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return forward_probs(cls, np.atleast_2d(Z)).argmax(axis=1)
