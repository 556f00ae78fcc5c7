"""Frozen forecasting backbone plus a shared attention head for heterogeneous medical time series."""

__version__ = "0.1.0"

from .backbone import BackboneConfig, BackboneWeights, extract_features, pretrain_forecasting
from .classifier import SDAWeights, classify
from .data import Dataset, DatasetSpec, load_dataset, make_synthetic_cohort, save_dataset, split_by_subject
from .metrics import MetricReport, aggregate_seeds, compute_metrics, delta_report
from .registry import ModelState, Registry, StageError, load_checkpoint, save_checkpoint
from .training import StageConfig, adapt, evaluate, few_shot_curve, repurpose

__all__ = [
    "__version__",
    "BackboneConfig",
    "BackboneWeights",
    "extract_features",
    "pretrain_forecasting",
    "SDAWeights",
    "classify",
    "Dataset",
    "DatasetSpec",
    "load_dataset",
    "save_dataset",
    "make_synthetic_cohort",
    "split_by_subject",
    "MetricReport",
    "compute_metrics",
    "delta_report",
    "aggregate_seeds",
    "ModelState",
    "Registry",
    "StageError",
    "load_checkpoint",
    "save_checkpoint",
    "StageConfig",
    "repurpose",
    "adapt",
    "evaluate",
    "few_shot_curve",
]
