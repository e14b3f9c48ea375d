"""Residual-variance versus non-missingness diagnostic on a fitted pair of models."""

from __future__ import annotations

import numpy as np

from .data import TEST, SparseDataset
from .edm import EdmFamily
from .evaluation import HeteroBin, hetero_diagnostic, residuals_and_probs, spearman_trend
from .linkage import IGNORABLE
from .svi import Trainer, TrainerConfig


def hetero_pipeline(
    dataset: SparseDataset,
    config: TrainerConfig,
    model_kind: str = "pmf",
    family: EdmFamily | str = EdmFamily.GAUSSIAN,
    covariates: np.ndarray | None = None,
    n_bins: int = 100,
) -> tuple[list[HeteroBin], float]:
    """Fit the data model with the ignorable linkage next to the missingness factorization,
    then bin the test residuals by fitted non-missingness probability.

    With the ignorable linkage the data-model fit is the same as training it
    alone on the non-missing entries, and the missingness factorization is a
    Poisson factorization of the binarized matrix.
    """
    trainer = Trainer(dataset, model_kind, IGNORABLE, config, family, covariates=covariates)
    trainer.run()
    rows, cols, y = dataset.part(TEST)
    resid, probs = residuals_and_probs(trainer.hpf, trainer.dm, rows, cols, y)
    bins = hetero_diagnostic(resid, probs, n_bins)
    return bins, spearman_trend(bins)
