"""Ancestral sampling of synthetic data from the coupled model."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy import optimize

from .data import DEFAULT_SPLIT, SparseDataset, assign_split
from .datamodels import DataModelKind
from .edm import EdmFamily, sample_natural
from .errors import ParameterDomainError
from .linkage import Linkage, phi


class DensityWarning(UserWarning):
    """The simulated matrix is denser than the sparse regime the model targets."""


@dataclass
class SimConfig:
    n_rows: int = 200
    n_cols: int = 150
    K: int = 5
    act_shape: float = 1.0
    act_rate: float = 1.0
    pop_shape: float = 1.0
    pop_rate: float = 1.0
    row_shape: float = 0.3
    col_shape: float = 0.3
    target_sparsity: float | None = 0.98
    rate: float | None = None
    model_kind: str = "gaussian_element"
    family: str = "gaussian"
    link: str = "exponential"
    c: float = 0.3
    mean_link: str = "ignorable"
    mean_c: float = 0.0
    mu: float = 1.0
    sigma2: float = 1.0
    theta: float = 0.0
    kappa: float = 1.0
    dm_K: int = 3
    prior_mean: float = 0.5
    prior_var: float = 0.25
    split: tuple[float, float, float] = DEFAULT_SPLIT
    seed: int = 0

    def __post_init__(self):
        self.split = tuple(float(v) for v in self.split)
        for name in ("n_rows", "n_cols", "K", "dm_K"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ParameterDomainError(f"{name} must be a positive integer, got {v}")
            setattr(self, name, int(v))
        if self.target_sparsity is not None and not 0.0 < self.target_sparsity < 1.0:
            raise ParameterDomainError(f"target_sparsity must lie in (0, 1), got {self.target_sparsity}")
        if self.rate is not None and not self.rate > 0:
            raise ParameterDomainError(f"rate must be positive, got {self.rate}")
        if self.sigma2 <= 0 or self.kappa <= 0 or self.prior_var <= 0:
            raise ParameterDomainError("sigma2, kappa and prior_var must be positive")
        DataModelKind(self.model_kind)
        EdmFamily(self.family)
        self.links()

    def links(self) -> tuple[Linkage, Linkage]:
        return Linkage(self.link, self.c), Linkage(self.mean_link, self.mean_c)


def _rescale_to_sparsity(rates: np.ndarray, target: float) -> float:
    """Multiplier ``s`` with ``mean(exp(-s * rates)) == target``."""
    if not np.any(rates > 0):
        raise ParameterDomainError("all simulated rates are zero")

    def gap(log_s):
        return np.mean(np.exp(-math.exp(log_s) * rates)) - target

    lo, hi = -60.0, 60.0
    return math.exp(optimize.brentq(gap, lo, hi, xtol=1e-14))


def simulate(config: SimConfig):
    """Sample a dataset and its ground truth.

    Returns ``(dataset, truth_arrays, truth_meta)``.  Every row draws its counts
    and values from its own child stream of the seed, so the output does not
    depend on how rows are processed.
    """
    cfg = config
    hpf_ss, dm_ss, row_ss, split_ss = np.random.SeedSequence(cfg.seed).spawn(4)
    hrng = np.random.default_rng(hpf_ss)
    drng = np.random.default_rng(dm_ss)
    R, C, K = cfg.n_rows, cfg.n_cols, cfg.K

    activity = hrng.gamma(cfg.act_shape, 1.0 / cfg.act_rate, R)
    popularity = hrng.gamma(cfg.pop_shape, 1.0 / cfg.pop_rate, C)
    U = hrng.gamma(cfg.row_shape, 1.0, (R, K)) / activity[:, None]
    V = hrng.gamma(cfg.col_shape, 1.0, (C, K)) / popularity[:, None]
    if cfg.rate is not None:
        rates = np.full((R, C), float(cfg.rate))
    else:
        rates = U @ V.T
        if cfg.target_sparsity is not None:
            s = _rescale_to_sparsity(rates, cfg.target_sparsity)
            U = U * s
            rates = rates * s

    link, mean_link = cfg.links()
    kind = DataModelKind(cfg.model_kind)
    family = EdmFamily(cfg.family)
    truth, mean_fn, channel = _data_truth(cfg, kind, family, drng, R, C)

    density = float(np.mean(-np.expm1(-rates)))
    if density > 0.5:
        warnings.warn(f"expected density {density:.3f} exceeds 0.5; the data are no longer extremely sparse", DensityWarning, stacklevel=2)

    rows, cols, counts, values = [], [], [], []
    for i, ss in enumerate(row_ss.spawn(R)):
        rng = np.random.default_rng(ss)
        n = rng.poisson(rates[i])
        j = np.flatnonzero(n)
        if j.size == 0:
            continue
        nj = n[j]
        y = _draw_values(channel, family, mean_fn(i, j), nj, link, mean_link, cfg, rng)
        rows.append(np.full(j.size, i))
        cols.append(j)
        counts.append(nj)
        values.append(y)

    cat = (lambda parts, dt: np.concatenate(parts).astype(dt) if parts else np.zeros(0, dt))
    rows, cols, counts, values = cat(rows, np.int64), cat(cols, np.int64), cat(counts, np.int64), cat(values, float)
    split_seed = int(np.random.default_rng(split_ss).integers(2**63))
    ds = SparseDataset(R, C, rows, cols, values, assign_split(rows.size, cfg.split, split_seed))

    truth.update({"activity": activity, "popularity": popularity, "row_factors": U, "col_factors": V, "counts": counts})
    meta = {
        "config": asdict(cfg),
        "kappa": cfg.sigma2 if channel == "gaussian" else cfg.kappa,
        "c": cfg.c,
        "link": link.kind.value,
        "mean_link": mean_link.kind.value,
        "mean_c": cfg.mean_c,
        "expected_density": density,
        "mean_missing_prob": float(np.mean(np.exp(-rates))),
        "n_entries": int(rows.size),
    }
    return ds, truth, meta


def _data_truth(cfg, kind, family, rng, R, C):
    """Draw data-model latents; returns ``(arrays, mean_fn(i, cols), channel)``."""
    if kind is DataModelKind.GAUSSIAN_ELEMENT:
        if family is EdmFamily.GAUSSIAN:
            return {}, (lambda i, j: np.full(j.size, cfg.mu)), "gaussian"
        return {}, (lambda i, j: np.full(j.size, cfg.theta)), "edm"
    k = cfg.dm_K
    if kind in (DataModelKind.GMM, DataModelKind.PMF, DataModelKind.HIER_LINREG):
        s = cfg.prior_mean + math.sqrt(cfg.prior_var) * rng.standard_normal((R, k))
        if kind is DataModelKind.GMM:
            return {"row_latent": s}, (lambda i, j: np.full(j.size, s[i].sum())), "gaussian"
        if kind is DataModelKind.PMF:
            v = cfg.prior_mean + math.sqrt(cfg.prior_var) * rng.standard_normal((C, k))
            return {"row_latent": s, "col_latent": v}, (lambda i, j: v[j] @ s[i]), "gaussian"
        x = rng.standard_normal((C, k))
        return {"row_latent": s, "covariates": x}, (lambda i, j: x[j] @ s[i]), "gaussian"
    shape = 1.0
    scale = cfg.prior_mean / shape
    s = rng.gamma(shape, scale, (R, k))
    if kind is DataModelKind.PMM:
        return {"row_latent": s}, (lambda i, j: np.full(j.size, s[i].sum())), "poisson"
    v = rng.gamma(shape, scale, (C, k))
    return {"row_latent": s, "col_latent": v}, (lambda i, j: v[j] @ s[i]), "poisson"


def _draw_values(channel, family, mean, n, link, mean_link, cfg, rng):
    if channel == "gaussian":
        loc = phi(mean_link, n) * mean
        return loc + np.sqrt(phi(link, n) * cfg.sigma2) * rng.standard_normal(n.size)
    if channel == "poisson":
        return rng.poisson(phi(link, n) * mean).astype(float)
    return sample_natural(family, mean, phi(link, n) * cfg.kappa, rng, n.size)
