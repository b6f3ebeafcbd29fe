"""Glue that turns a dataset + split into features, a trained head and its retrain."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import EvalContext
from .model_core import ClassifierState, ExtractorSpec, TrainConfig, extract_features, train_classifier
from .synth_data import LabeledDataset, SplitSpec, gen_gaussian_classes, make_split


@dataclass
class Problem:
    dataset: LabeledDataset
    split: SplitSpec
    extractor: ExtractorSpec
    Z: np.ndarray  # features for every row of the dataset
    model: ClassifierState
    retrained: ClassifierState | None
    train_cfg: TrainConfig

    @property
    def n_classes(self) -> int:
        return self.dataset.class_count

    def rows(self, idx):
        return self.Z[idx], self.dataset.labels[idx]

    @property
    def forget(self):
        return self.rows(self.split.forget_indices)

    @property
    def retain(self):
        return self.rows(self.split.retain_indices)

    @property
    def test(self):
        """Test rows; class-wise splits drop the forgotten class."""
        idx = self.split.test_indices
        if self.split.mode == "class_wise":
            idx = idx[self.dataset.labels[idx] != self.split.params["target_class"]]
        return self.rows(idx)

    @property
    def train(self):
        return self.rows(self.split.train_indices)

    @property
    def n_train(self) -> int:
        return len(self.split.train_indices)

    def evaluator(self) -> EvalContext:
        return EvalContext(self.forget, self.retain, self.test, self.retrained)


def build_problem(
    dataset: LabeledDataset,
    split: SplitSpec,
    extractor: ExtractorSpec,
    train_cfg: TrainConfig | None = None,
    with_retrain: bool = True,
) -> Problem:
    cfg = train_cfg or TrainConfig()
    Z = extract_features(extractor, dataset.features)
    y = dataset.labels
    tr = split.train_indices
    model = train_classifier(Z[tr], y[tr], dataset.class_count, cfg, extractor=extractor).state
    retrained = None
    if with_retrain:
        r = split.retain_indices
        retrained = train_classifier(Z[r], y[r], dataset.class_count, cfg, extractor=extractor).state
    return Problem(dataset, split, extractor, Z, model, retrained, cfg)


def desk_problem(
    seed: int = 0,
    n_per_class: int = 200,
    mode: str = "class_wise",
    target_class: int = 2,
    fraction: float = 0.1,
    spread: float = 0.3,
    classes: int = 3,
    d_in: int = 8,
    d_feat: int = 16,
    l2: float = 1e-3,
    tol: float = 1e-6,
    with_retrain: bool = True,
) -> Problem:
    """Gaussian classes behind a frozen random-ReLU extractor."""
    ds = gen_gaussian_classes(classes, d_in, n_per_class, spread, seed)
    if mode == "class_wise":
        split = make_split(ds, mode, target_class=target_class)
    else:
        split = make_split(ds, mode, fraction=fraction, seed=seed)
    ext = ExtractorSpec.random_relu(d_in, d_feat, seed + 100)
    return build_problem(ds, split, ext, TrainConfig(l2=l2, tol=tol), with_retrain)
