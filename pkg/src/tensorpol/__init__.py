"""Tensor-channel equivariant graph network for molecular polarizability."""

from .data import (
    DatasetRecord,
    SplitManifest,
    make_splits,
    parse_dataset,
    synthetic_generator,
)
from .evaluation import equiv_test, metrics, param_count, relative_deviatoric_report
from .graph import Molecule, build_graph
from .model import Model, ModelConfig, load_checkpoint, save_checkpoint
from .tensor_algebra import decompose
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "DatasetRecord",
    "Model",
    "ModelConfig",
    "Molecule",
    "SplitManifest",
    "TrainConfig",
    "build_graph",
    "decompose",
    "equiv_test",
    "load_checkpoint",
    "make_splits",
    "metrics",
    "param_count",
    "parse_dataset",
    "relative_deviatoric_report",
    "save_checkpoint",
    "synthetic_generator",
    "train",
    "__version__",
]
