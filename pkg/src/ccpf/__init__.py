"""Coupled compound Poisson factorization for sparse matrices with informative missingness."""

from .data import SparseDataset, load_dataset
from .edm import EdmFamily
from .errors import (
    CCPFError,
    CheckpointError,
    DataError,
    DegenerateLikelihoodError,
    ParameterDomainError,
    SupportError,
    UndefinedMetricError,
    UnsupportedCombinationError,
)
from .linkage import IGNORABLE, Linkage
from .svi import Trainer, TrainerConfig, train, train_standalone

__all__ = [
    "CCPFError",
    "CheckpointError",
    "DataError",
    "DegenerateLikelihoodError",
    "EdmFamily",
    "IGNORABLE",
    "Linkage",
    "ParameterDomainError",
    "SparseDataset",
    "SupportError",
    "Trainer",
    "TrainerConfig",
    "UndefinedMetricError",
    "UnsupportedCombinationError",
    "load_dataset",
    "train",
    "train_standalone",
]
