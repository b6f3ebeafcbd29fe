"""Influence-guided machine unlearning on a frozen-feature softmax head."""

__version__ = "0.1.0"

from .errors import EmptySelectionError, FormatError, NumericError, ParameterError, TrainingError, UnlearnLabError
from .kernels import BACKEND
from .model_core import ClassifierState, ExtractorSpec, TrainConfig, train_classifier
from .synth_data import LabeledDataset, SplitSpec, gen_gaussian_classes, gen_markov_sequences, make_split
from .unlearn import UnlearnConfig, UnlearnRun, run_method

__all__ = [
    "BACKEND",
    "ClassifierState",
    "EmptySelectionError",
    "ExtractorSpec",
    "FormatError",
    "LabeledDataset",
    "NumericError",
    "ParameterError",
    "SplitSpec",
    "TrainConfig",
    "TrainingError",
    "UnlearnConfig",
    "UnlearnLabError",
    "UnlearnRun",
    "gen_gaussian_classes",
    "gen_markov_sequences",
    "make_split",
    "run_method",
    "train_classifier",
]
