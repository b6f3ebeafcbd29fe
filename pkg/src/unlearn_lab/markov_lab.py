"""First-order sequence model on a mixture of uniform Markov chains.

A one-hot encoding of the current state makes next-state prediction a plain
softmax regression, so every unlearning method and the influence machinery
apply unchanged, and the retrained conditional is known in closed form.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ParameterError
from .metrics import kl_to_reference
from .model_core import ClassifierState, ExtractorSpec, TrainConfig, ce_loss, forward_probs, train_classifier
from .synth_data import MARKOV_SOURCES, N_STATES, LabeledDataset, MarkovCorpus, gen_markov_sequences
from .unlearn import UnlearnConfig, run_method

CASE_METHODS = ("ga", "npo", "simnpo", "imu")
CSV_COLUMNS = ["method", "epochs", "loss_retain", "loss_forget", "kl_retain", "kl_forget"]
RETAIN_SOURCE = "retain"


@dataclass
class CaseStudyTable:
    loss_retain: float
    loss_forget: float
    kl_retain: float
    kl_forget: float


@dataclass
class MarkovConfig:
    n_per_source: int = 200
    T_len: int = 20
    seed: int = 0
    l2: float = 1e-5
    tol: float = 1e-7
    learning_rate: float = 1.0
    epochs: int = 30
    beta: float = 1.0
    # epochs at which the paired comparison is read off
    grid: tuple[int, ...] = (5, 10, 15, 20, 25, 30)
    methods: tuple[str, ...] = CASE_METHODS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["methods"] = list(self.methods)
        return d


def one_hot(states) -> np.ndarray:
    states = np.asarray(states, dtype=np.int64)
    out = np.zeros((len(states), N_STATES))
    out[np.arange(len(states)), states] = 1.0
    return out


def sequences_to_pairs(corpus: MarkovCorpus) -> LabeledDataset:
    """One ``(one_hot(s_t), s_{t+1})`` row per adjacent pair; ``meta["source"]`` tags each row."""
    seqs = np.asarray(corpus.sequences, dtype=np.int64)
    if seqs.ndim != 2 or seqs.shape[1] < 2:
        raise ParameterError("sequences must have length >= 2")
    ctx = seqs[:, :-1].ravel()
    nxt = seqs[:, 1:].ravel()
    src = np.repeat(np.asarray(corpus.sources), seqs.shape[1] - 1)
    meta = {"kind": "markov_pairs", "source": src}
    return LabeledDataset(one_hot(ctx), nxt, N_STATES, corpus.seed, meta)


def _source_of(state: int) -> str:
    for name, states in MARKOV_SOURCES.items():
        if state in states:
            return name
    raise ParameterError(f"state {state} belongs to no source")


def source_reference(state: int) -> np.ndarray:
    """Uniform distribution over the state set of the chain that owns ``state``."""
    p = np.zeros(N_STATES)
    members = MARKOV_SOURCES[_source_of(int(state))]
    p[list(members)] = 1.0 / len(members)
    return p


def analytic_retrained_reference(state: int) -> np.ndarray:
    """Population-optimal conditional of a model trained on retain chains only."""
    if int(state) not in MARKOV_SOURCES[RETAIN_SOURCE]:
        raise ParameterError(f"context {state} is outside the retain support")
    return source_reference(state)


@dataclass
class MarkovProblem:
    corpus: MarkovCorpus
    pairs: LabeledDataset
    model: ClassifierState
    forget_mask: np.ndarray
    cfg: MarkovConfig
    train_epochs: int = 0
    _refs: tuple | None = field(default=None, repr=False)

    def references(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-row analytic references for the retain and forget pairs (cached)."""
        if self._refs is None:
            table = np.array([source_reference(s) if s else np.zeros(N_STATES) for s in range(N_STATES)])
            ctx = self.pairs.features.argmax(axis=1)
            self._refs = (table[ctx[~self.forget_mask]], table[ctx[self.forget_mask]])
        return self._refs

    @property
    def retain(self):
        m = ~self.forget_mask
        return self.pairs.features[m], self.pairs.labels[m]

    @property
    def forget(self):
        m = self.forget_mask
        return self.pairs.features[m], self.pairs.labels[m]


def _unique_weighted(Z, y):
    key = Z.argmax(axis=1) * N_STATES + y
    uniq, first, counts = np.unique(key, return_index=True, return_counts=True)
    return Z[first], y[first], counts.astype(np.float64)


def build_markov_problem(cfg: MarkovConfig) -> MarkovProblem:
    corpus = gen_markov_sequences(cfg.n_per_source, cfg.T_len, cfg.seed)
    pairs = sequences_to_pairs(corpus)
    # duplicates collapse to weighted unique rows; the objective is unchanged
    Zu, yu, cnt = _unique_weighted(pairs.features, pairs.labels)
    res = train_classifier(
        Zu, yu, N_STATES, TrainConfig(l2=cfg.l2, tol=cfg.tol, max_epochs=200_000),
        extractor=ExtractorSpec.identity(N_STATES), sample_weight=cnt,
    )
    forget = pairs.meta["source"] != RETAIN_SOURCE
    return MarkovProblem(corpus, pairs, res.state, forget, cfg, res.epochs)


def evaluate(cls: ClassifierState, prob: MarkovProblem) -> CaseStudyTable:
    Zr, yr = prob.retain
    Zf, yf = prob.forget
    ref_r, ref_f = prob.references()
    return CaseStudyTable(
        loss_retain=float(np.mean(ce_loss(cls, Zr, yr))),
        loss_forget=float(np.mean(ce_loss(cls, Zf, yf))),
        kl_retain=kl_to_reference(cls, ref_r, Zr),
        kl_forget=kl_to_reference(cls, ref_f, Zf),
    )


def forget_state_mass(cls: ClassifierState, prob: MarkovProblem) -> float:
    """Mean probability a forget context puts on the states of its own chain."""
    Zf, _ = prob.forget
    _, ref_f = prob.references()
    P = forward_probs(cls, Zf)
    return float(np.sum(P * (ref_f > 0), axis=1).mean())


@dataclass
class CaseStudyResult:
    original: CaseStudyTable
    # method -> epoch -> table
    grid: dict[str, dict[int, CaseStudyTable]] = field(default_factory=dict)
    final_states: dict[str, ClassifierState] = field(default_factory=dict)

    def final(self, method: str) -> CaseStudyTable:
        g = self.grid[method]
        return g[max(g)]


def run_case_study(cfg: MarkovConfig | None = None, prob: MarkovProblem | None = None) -> CaseStudyResult:
    cfg = cfg or MarkovConfig()
    bad = set(cfg.methods) - set(CASE_METHODS)
    if bad:
        raise ParameterError(f"unsupported methods {sorted(bad)}; valid: {', '.join(CASE_METHODS)}")
    prob = prob or build_markov_problem(cfg)
    Zf, yf = prob.forget
    out = CaseStudyResult(evaluate(prob.model, prob))
    grid = sorted(set(g for g in cfg.grid if g <= cfg.epochs) | {cfg.epochs})
    for method in cfg.methods:
        ucfg = UnlearnConfig(method=method, learning_rate=cfg.learning_rate, epochs=cfg.epochs, beta=cfg.beta,
                             rng_seed=cfg.seed)
        run = run_method(prob.model, Zf, yf, ucfg, record_trajectory=True)
        tables = {}
        for e in grid:
            if e <= len(run.trajectory):
                tables[e] = evaluate(ClassifierState.from_theta(run.trajectory[e - 1]), prob)
        out.grid[method] = tables
        out.final_states[method] = run.final
    return out


def write_case_study_csv(path, result: CaseStudyResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerow({"method": "original", "epochs": 0, **asdict(result.original)})
        for method, tables in result.grid.items():
            e = max(tables)
            w.writerow({"method": method, "epochs": e, **asdict(tables[e])})


LN3 = math.log(3.0)
