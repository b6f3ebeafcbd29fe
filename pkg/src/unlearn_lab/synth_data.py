"""Synthetic datasets: Gaussian class clusters and Markov-chain corpora."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import ortho_group

from .errors import FormatError, ParameterError

TEST_FRACTION = 0.2

# state sets of the three chains in the case study
MARKOV_SOURCES = {
    "retain": (1, 2, 3),
    "forget1": (4, 5, 6),
    "forget2": (7, 8, 9),
}
N_STATES = 10


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ParameterError("features must be [n, d] with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ParameterError("labels out of range")

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(idx, dtype=np.int64)
        return self.features[idx], self.labels[idx]

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (
            self.class_count == other.class_count
            and self.seed == other.seed
            and np.array_equal(self.labels, other.labels)
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )


@dataclass
class SplitSpec:
    mode: str
    params: dict
    forget_indices: np.ndarray
    retain_indices: np.ndarray
    test_indices: np.ndarray

    @property
    def train_indices(self) -> np.ndarray:
        return np.sort(np.concatenate([self.forget_indices, self.retain_indices]))

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "params": self.params,
            "forget": self.forget_indices.tolist(),
            "retain": self.retain_indices.tolist(),
            "test": self.test_indices.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitSpec":
        arr = lambda k: np.asarray(d[k], dtype=np.int64)  # noqa: E731
        return cls(d["mode"], dict(d.get("params", {})), arr("forget"), arr("retain"), arr("test"))


@dataclass
class MarkovCorpus:
    sequences: np.ndarray  # [n_seq, T_len] int64
    sources: np.ndarray  # [n_seq] of source names
    seed: int

    def __len__(self):
        return len(self.sequences)


def _simplex_means(C: int, d_in: int, rng: np.random.Generator) -> np.ndarray:
    """Unit-norm, pairwise-equidistant class centres, randomly rotated."""
    E = np.eye(C) - 1.0 / C
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    if d_in >= C:
        M = np.zeros((C, d_in))
        M[:, :C] = E
    else:
        # not enough room for a regular simplex: project it down, then renormalise
        M = E @ rng.standard_normal((C, d_in))
        M /= np.linalg.norm(M, axis=1, keepdims=True)
    Q = ortho_group.rvs(d_in, random_state=np.random.RandomState(rng.integers(2**31)))
    return M @ Q


def gen_gaussian_classes(C: int, d_in: int, n_per_class: int, spread: float, seed: int) -> LabeledDataset:
    """Isotropic Gaussian clusters with std ``spread`` around unit-norm simplex means."""
    if C < 2 or d_in < 2 or n_per_class < 5:
        raise ParameterError("need C >= 2, d_in >= 2, n_per_class >= 5")
    if not spread > 0:
        raise ParameterError("spread must be positive")
    rng = np.random.default_rng(seed)
    means = _simplex_means(C, d_in, rng)
    X = np.concatenate([means[c] + spread * rng.standard_normal((n_per_class, d_in)) for c in range(C)])
    y = np.repeat(np.arange(C), n_per_class)
    meta = {"kind": "gaussian", "d_in": d_in, "n_per_class": n_per_class, "spread": spread}
    return LabeledDataset(X, y, C, int(seed), meta)


def gen_markov_sequences(n_per_source: int, T_len: int, seed: int) -> MarkovCorpus:
    """Equal counts of retain / forget1 / forget2 chains, each uniform over its own state set."""
    if T_len < 2:
        raise ParameterError("T_len must be >= 2")
    if n_per_source < 1:
        raise ParameterError("n_per_source must be >= 1")
    rng = np.random.default_rng(seed)
    seqs, tags = [], []
    for name, states in MARKOV_SOURCES.items():
        seqs.append(rng.choice(np.asarray(states), size=(n_per_source, T_len)))
        tags += [name] * n_per_source
    return MarkovCorpus(np.concatenate(seqs).astype(np.int64), np.asarray(tags), int(seed))


def _stratified_test(labels: np.ndarray, class_count: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x7E57])
    out = []
    for c in range(class_count):
        idx = np.flatnonzero(labels == c)
        k = int(round(TEST_FRACTION * len(idx)))
        out.append(rng.permutation(idx)[:k])
    return np.sort(np.concatenate(out)).astype(np.int64)


def make_split(ds: LabeledDataset, mode: str, **params) -> SplitSpec:
    """Split into forget / retain / test.

    The test part is a stratified 20% drawn from the dataset seed alone, so it is
    identical for every mode. ``mode`` is ``"class_wise"`` (``target_class=``) or
    ``"sample_random"`` (``fraction=``, ``seed=``).
    """
    test = _stratified_test(ds.labels, ds.class_count, ds.seed)
    train = np.setdiff1d(np.arange(ds.n), test)
    if mode == "class_wise":
        target = params.get("target_class")
        if target is None or not 0 <= int(target) < ds.class_count:
            raise ParameterError(f"invalid target_class {target!r}")
        mask = ds.labels[train] == int(target)
        forget = train[mask]
        params = {"target_class": int(target)}
    elif mode == "sample_random":
        frac = params.get("fraction")
        if frac is None or not 0 < float(frac) < 1:
            raise ParameterError("fraction must lie in (0, 1)")
        k = int(round(float(frac) * len(train)))
        rng = np.random.default_rng(int(params.get("seed", 0)))
        forget = np.sort(rng.choice(train, size=k, replace=False)) if k else train[:0]
        params = {"fraction": float(frac), "seed": int(params.get("seed", 0))}
    else:
        raise ParameterError(f"unknown split mode {mode!r}")
    if len(forget) == 0:
        raise ParameterError("forget set is empty")
    retain = np.setdiff1d(train, forget)
    return SplitSpec(mode, params, forget.astype(np.int64), retain.astype(np.int64), test)


# ------------------------------------------------------------------- file IO
# Layout: line 1 is a JSON header, the rest is CSV with a header row
# (f0..f{d-1}, label). Floats are written with repr() so reads are bit-exact.


def save_dataset(ds: LabeledDataset, path, split: SplitSpec | None = None) -> None:
    header = {
        "format": "unlearn-lab-dataset/1",
        "n": ds.n,
        "dim": ds.dim,
        "class_count": ds.class_count,
        "seed": ds.seed,
        "meta": ds.meta,
        "split": split.to_dict() if split is not None else None,
    }
    buf = io.StringIO()
    buf.write(json.dumps(header, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{j}" for j in range(ds.dim)] + ["label"])
    for row, lab in zip(ds.features, ds.labels):
        w.writerow([repr(float(v)) for v in row] + [int(lab)])
    Path(path).write_text(buf.getvalue())


def load_dataset_with_split(path) -> tuple[LabeledDataset, SplitSpec | None]:
    text = Path(path).read_text()
    first, _, body = text.partition("\n")
    try:
        header = json.loads(first)
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad JSON header: {exc}", "header") from exc
    for key in ("n", "dim", "class_count", "seed"):
        if key not in header:
            raise FormatError("missing header key", key)
    n, dim = int(header["n"]), int(header["dim"])
    rows = list(csv.reader(io.StringIO(body)))
    if not rows or rows[0] != [f"f{j}" for j in range(dim)] + ["label"]:
        raise FormatError("CSV column header does not match dim", "columns")
    rows = [r for r in rows[1:] if r]
    if len(rows) != n:
        raise FormatError(f"expected {n} rows, found {len(rows)}", "n")
    X = np.empty((n, dim))
    y = np.empty(n, dtype=np.int64)
    for i, r in enumerate(rows):
        if len(r) != dim + 1:
            raise FormatError(f"row {i} has {len(r)} fields", f"row[{i}]")
        try:
            X[i] = [float(v) for v in r[:dim]]
            y[i] = int(r[dim])
        except ValueError as exc:
            raise FormatError(f"row {i}: {exc}", f"row[{i}]") from exc
    ds = LabeledDataset(X, y, int(header["class_count"]), int(header["seed"]), header.get("meta") or {})
    split = SplitSpec.from_dict(header["split"]) if header.get("split") else None
    return ds, split


def load_dataset(path) -> LabeledDataset:
    return load_dataset_with_split(path)[0]


def save_corpus(corpus: MarkovCorpus, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source"] + [f"s{t}" for t in range(corpus.sequences.shape[1])])
        for tag, seq in zip(corpus.sources, corpus.sequences):
            w.writerow([tag] + seq.tolist())


def load_corpus(path, seed: int = -1) -> MarkovCorpus:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][0] != "source":
        raise FormatError("missing header row", "source")
    body = [r for r in rows[1:] if r]
    try:
        seqs = np.asarray([[int(v) for v in r[1:]] for r in body], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(str(exc), "sequence") from exc
    tags = np.asarray([r[0] for r in body])
    bad = set(tags) - set(MARKOV_SOURCES)
    if bad:
        raise FormatError(f"unknown sources {sorted(bad)}", "source")
    return MarkovCorpus(seqs, tags, seed)
