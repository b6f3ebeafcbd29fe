"""Evaluation metrics: accuracies, loss-threshold MIA, W1 output distance, KL."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ParameterError
from .model_core import ClassifierState, ce_loss, forward_probs, predict

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class EvalReport:
    acc_forget: float
    acc_retain: float
    acc_test: float
    mia: float
    w_dist: float
    runtime_seconds: float = 0.0
    kl_retain: float | None = None
    kl_forget: float | None = None

    def as_row(self) -> dict:
        return asdict(self)


RUNS_COLUMNS = ["run_id", "method", "seed"] + [f.name for f in fields(EvalReport)]


def accuracy(cls: ClassifierState, Z, y) -> float:
    Z = np.atleast_2d(Z)
    if len(Z) == 0:
        raise ParameterError("accuracy of an empty subset is undefined")
    return float(np.mean(predict(cls, Z) == np.asarray(y)))


def _best_threshold(member_losses, nonmember_losses) -> float | None:
    """Loss threshold maximising membership accuracy (loss > t means non-member).

    Candidates are the observed losses plus -inf, so the attack depends only on
    the ordering of losses.
    """
    lo = np.asarray(member_losses, dtype=np.float64)
    hi = np.asarray(nonmember_losses, dtype=np.float64)
    vals = np.unique(np.concatenate([lo, hi]))
    if len(vals) < 2:
        return None
    cands = np.concatenate([[-np.inf], vals])
    lo_s, hi_s = np.sort(lo), np.sort(hi)
    correct = np.searchsorted(lo_s, cands, side="right") + (len(hi_s) - np.searchsorted(hi_s, cands, side="right"))
    # among equally good thresholds keep the largest (fewest non-member calls)
    best = np.flatnonzero(correct == correct.max())[-1]
    return float(cands[best])


def mia_from_losses(forget_losses, retain_losses, test_losses) -> float:
    """Loss-threshold attack score given per-sample losses (see ``mia_score``)."""
    t = _best_threshold(retain_losses, test_losses)
    if t is None:
        log.warning("all retain/test losses are equal; MIA score set to 0.5")
        return 0.5
    return float(np.mean(np.asarray(forget_losses) > t))


def mia_score(cls: ClassifierState, forget, retain, test) -> float:
    """Fraction of forget samples a loss-threshold attack calls non-members.

    The threshold is fitted on retain (members) vs test (non-members) losses.
    1.0 means the forget set looks entirely unseen.
    """
    for name, (Z, _) in (("forget", forget), ("retain", retain), ("test", test)):
        if len(np.atleast_2d(Z)) == 0:
            raise ParameterError(f"{name} set is empty")
    losses = [ce_loss(cls, np.atleast_2d(Z), y) for Z, y in (forget, retain, test)]
    return mia_from_losses(*losses)


def w1_discrete(p, q) -> np.ndarray:
    """Row-wise W1 under the 0/1 ground metric, i.e. total variation."""
    return 0.5 * np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1)


def w1_output_distance(model_a: ClassifierState, model_b: ClassifierState, Z) -> float:
    if model_a.n_classes != model_b.n_classes:
        raise ParameterError("models disagree on the number of classes")
    Z = np.atleast_2d(Z)
    return float(np.mean(w1_discrete(forward_probs(model_a, Z), forward_probs(model_b, Z))))


def kl_divergence(ref, model) -> tuple[np.ndarray, bool]:
    """Row-wise KL(ref || model) in nats over the support of ``ref``.

    Model mass below ``PROB_FLOOR`` on that support is clamped; the flag reports it.
    """
    ref = np.atleast_2d(np.asarray(ref, dtype=np.float64))
    model = np.atleast_2d(np.asarray(model, dtype=np.float64))
    supp = ref > 0
    clamped = bool(np.any(supp & (model < PROB_FLOOR)))
    m = np.maximum(model, PROB_FLOOR)
    terms = np.where(supp, ref * (np.log(np.where(supp, ref, 1.0)) - np.log(m)), 0.0)
    return np.maximum(terms.sum(axis=1), 0.0), clamped


def kl_to_reference(cls: ClassifierState, reference, contexts) -> float:
    """Mean over context features of KL(reference(context) || model(context)).

    ``reference`` is a callable mapping a row index to a distribution, or an array
    with one reference row per context.
    """
    contexts = np.atleast_2d(contexts)
    P = forward_probs(cls, contexts)
    R = np.array([reference(i) for i in range(len(contexts))]) if callable(reference) else np.atleast_2d(reference)
    kl, clamped = kl_divergence(R, P)
    if clamped:
        log.warning("model assigns < %g mass on reference support; clamped", PROB_FLOOR)
    return float(kl.mean())


@dataclass
class EvalContext:
    """Everything needed to score a model against one split."""

    forget: tuple[np.ndarray, np.ndarray]
    retain: tuple[np.ndarray, np.ndarray]
    test: tuple[np.ndarray, np.ndarray]
    retrained: ClassifierState | None = None

    def __call__(self, cls: ClassifierState, runtime: float = 0.0) -> EvalReport:
        w = w1_output_distance(cls, self.retrained, self.retain[0]) if self.retrained is not None else float("nan")
        return EvalReport(
            acc_forget=accuracy(cls, *self.forget),
            acc_retain=accuracy(cls, *self.retain),
            acc_test=accuracy(cls, *self.test),
            mia=mia_score(cls, self.forget, self.retain, self.test),
            w_dist=w,
            runtime_seconds=runtime,
        )


def append_runs_csv(path, rows: list[dict]) -> None:
    new = not os.path.exists(path)
    with open(path, "a", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RUNS_COLUMNS, lineterminator="\n", extrasaction="ignore")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow(r)
