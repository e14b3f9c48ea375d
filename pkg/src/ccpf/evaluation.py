"""
Held-out evaluation and diagnostics.

The predictive density of a non-missing cell mixes the observation model over
the interaction count, ``sum_n p(y | theta, phi(n)) ZTP(n | lam)`` for
``n = 1..n_tr``, at the point estimates of the fitted models.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import special, stats

from .datamodels import DataModel
from .edm import EdmFamily, EdmParams, log_partition_d1, sample_natural
from .errors import DataError, UndefinedMetricError
from .likelihood import RECORD_WIDTH, count_loglik
from .linkage import IGNORABLE, Linkage, compound_sample, expected_phi, phi, ztp_log_pmf
from .missingness import DEFAULT_N_TR, HpfState, expected_rates


@dataclass(frozen=True)
class EvalReport:
    test_ll: float
    test_ll_per_entry: float
    rmse: float
    r_squared: float
    n_entries: int

    HEADER = ("test_ll", "test_ll_per_entry", "rmse", "r_squared", "n_entries")

    def to_tsv(self) -> str:
        vals = (self.test_ll, self.test_ll_per_entry, self.rmse, self.r_squared, self.n_entries)
        return "\t".join(self.HEADER) + "\n" + "\t".join(_fmt(v) for v in vals) + "\n"


@dataclass(frozen=True)
class HeteroBin:
    quantile_rank: int
    mean_nonmissing_prob: float
    residual_variance: float
    count: int


class LogLik(NamedTuple):
    total: float
    per_entry: float
    n_entries: int


def _fmt(v) -> str:
    return str(v) if isinstance(v, (int, np.integer)) else repr(float(v))


def _point_records(dm: DataModel, rows, cols, y, kappa=None):
    """Records whose moments are the point estimates (zero posterior spread)."""
    pred = dm.predict(rows, cols)
    rec = np.zeros((len(rows), RECORD_WIDTH))
    rec[:, 0] = y
    if dm.channel == "gaussian":
        m = pred["mean"]
        var = pred["var"] if kappa is None or not dm.kappa_free else np.full(len(rows), float(kappa))
        rec[:, 1] = m
        rec[:, 2] = m * m
        rec[:, 3] = 1.0 / var
        rec[:, 4] = -np.log(var)
    elif dm.channel == "poisson":
        rec[:, 1] = pred["rate"]
    else:
        rec[:, 1] = pred["theta"]
    return rec


def _count_loglik_grid(dm, rec, mean_link, link, n, kappa):
    kappa = dm.kappa if kappa is None else kappa
    return count_loglik(dm.channel, dm.family, rec, phi(mean_link, n), phi(link, n), kappa, False)


def predictive_log_densities(
    hpf: HpfState | None,
    dm: DataModel,
    link: Linkage,
    rows,
    cols,
    y,
    n_tr: int = DEFAULT_N_TR,
    mean_link: Linkage = IGNORABLE,
    kappa: float | None = None,
    normalize: bool = True,
) -> np.ndarray:
    """Log predictive density of each cell under the count mixture.

    With ``normalize`` the ZTP weights are renormalised over ``1..n_tr``.
    ``hpf`` may be ``None`` when both linkages are ignorable.
    """
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    y = np.asarray(y, dtype=float)
    rec = _point_records(dm, rows, cols, y, kappa)
    if link.ignorable and mean_link.ignorable and normalize:
        return _count_loglik_grid(dm, rec, mean_link, link, np.array([1]), kappa)[:, 0]
    if hpf is None:
        raise ValueError("a missingness model is needed for non-ignorable linkages")
    lam = expected_rates(hpf, rows, cols)
    return _mixture(dm, rec, lam, mean_link, link, n_tr, kappa, normalize)


def _mixture(dm, rec, lam, mean_link, link, n_tr, kappa, normalize):
    n = np.arange(1, n_tr + 1)
    logw = ztp_log_pmf(lam[:, None], n[None, :])
    ll = _count_loglik_grid(dm, rec, mean_link, link, n, kappa)
    out = special.logsumexp(ll + logw, axis=1)
    if normalize:
        out = out - special.logsumexp(logw, axis=1)
    return out


def predictive_log_density(
    dm: DataModel,
    i: int,
    j: int,
    y: float,
    link: Linkage,
    lam: float,
    kappa: float | None = None,
    n_tr: int = DEFAULT_N_TR,
    mean_link: Linkage = IGNORABLE,
    normalize: bool = True,
) -> float:
    """Single-cell :func:`predictive_log_densities` with the rate ``lam`` given directly."""
    rows, cols = np.array([i]), np.array([j])
    rec = _point_records(dm, rows, cols, np.array([float(y)]), kappa)
    if link.ignorable and mean_link.ignorable and normalize:
        return float(_count_loglik_grid(dm, rec, mean_link, link, np.array([1]), kappa)[0, 0])
    return float(_mixture(dm, rec, np.array([float(lam)]), mean_link, link, n_tr, kappa, normalize)[0])


def test_log_likelihood(
    hpf: HpfState | None,
    dm: DataModel,
    link: Linkage,
    kappa: float | None,
    n_tr: int,
    test_set,
    mean_link: Linkage = IGNORABLE,
    normalize: bool = True,
) -> LogLik:
    """Summed and per-entry held-out log-likelihood of ``test_set = (rows, cols, y)``.

    The sum is exactly rounded, so it does not depend on entry order.
    """
    rows, cols, y = test_set
    if len(rows) == 0:
        raise DataError("empty test set")
    ld = predictive_log_densities(hpf, dm, link, rows, cols, y, n_tr, mean_link, kappa, normalize)
    total = math.fsum(ld)
    return LogLik(total, total / len(ld), int(len(ld)))


def predicted_means(hpf: HpfState | None, dm: DataModel, link: Linkage, rows, cols, mean_link: Linkage = IGNORABLE) -> np.ndarray:
    """Conditional mean of non-missing cells, marginalised over the count."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    pred = dm.predict(rows, cols)
    active = mean_link if dm.channel == "gaussian" else link
    if active.ignorable:
        scale = 1.0
    else:
        if hpf is None:
            raise ValueError("a missingness model is needed for non-ignorable linkages")
        scale = expected_phi(active, expected_rates(hpf, rows, cols))
    if dm.channel == "gaussian":
        return scale * pred["mean"]
    if dm.channel == "poisson":
        return scale * pred["rate"]
    return scale * dm.kappa * log_partition_d1(dm.family, pred["theta"])


def rmse_r2(pred, y) -> tuple[float, float]:
    pred = np.asarray(pred, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise DataError("empty test set")
    sse = math.fsum((y - pred) ** 2)
    sst = math.fsum((y - math.fsum(y) / y.size) ** 2)
    if sst == 0.0:
        raise UndefinedMetricError("R^2 is undefined for a constant test set")
    return math.sqrt(sse / y.size), 1.0 - sse / sst


def point_metrics(hpf, dm, link, test_set, mean_link: Linkage = IGNORABLE) -> tuple[float, float]:
    """``(rmse, r_squared)`` of the predicted means on ``test_set``."""
    rows, cols, y = test_set
    if len(rows) == 0:
        raise DataError("empty test set")
    return rmse_r2(predicted_means(hpf, dm, link, rows, cols, mean_link), y)


def evaluate(hpf, dm, link, test_set, n_tr=DEFAULT_N_TR, mean_link=IGNORABLE) -> EvalReport:
    ll = test_log_likelihood(hpf, dm, link, None, n_tr, test_set, mean_link)
    rmse, r2 = point_metrics(hpf, dm, link, test_set, mean_link)
    return EvalReport(ll.total, ll.per_entry, rmse, r2, ll.n_entries)


def hetero_diagnostic(residuals, nonmissing_probs, n_bins: int = 100) -> list[HeteroBin]:
    """Residual variance in equal-count bins of increasing non-missingness probability.

    Each bin variance is divided by the variance of all residuals.
    ``residuals`` may also be given as ``(entry, residual)`` pairs.
    """
    r = np.asarray(residuals, dtype=float)
    if r.ndim == 2:
        r = r[:, -1]
    p = np.asarray(nonmissing_probs, dtype=float)
    if r.shape != p.shape:
        raise ValueError("residuals and probabilities differ in length")
    if r.size < n_bins:
        raise DataError(f"need at least {n_bins} entries, got {r.size}")
    order = np.argsort(p, kind="stable")
    total = r.var()
    bins = []
    for rank, idx in enumerate(np.array_split(order, n_bins)):
        v = r[idx].var() / total if total > 0 else 0.0
        bins.append(HeteroBin(rank, float(p[idx].mean()), float(v), int(idx.size)))
    return bins


def spearman_trend(bins: list[HeteroBin]) -> float:
    """Spearman correlation between bin rank and normalised residual variance."""
    v = [b.residual_variance for b in bins]
    if np.ptp(v) == 0:
        return 0.0
    return float(stats.spearmanr([b.quantile_rank for b in bins], v).statistic)


def hetero_bins_tsv(bins: list[HeteroBin]) -> str:
    lines = ["quantile_rank\tmean_nonmissing_prob\tresidual_variance\tcount"]
    lines += [f"{b.quantile_rank}\t{b.mean_nonmissing_prob!r}\t{b.residual_variance!r}\t{b.count}" for b in bins]
    return "\n".join(lines) + "\n"


def residuals_and_probs(hpf, dm, rows, cols, y, link: Linkage = IGNORABLE, mean_link: Linkage = IGNORABLE):
    """Residuals of the predicted means and fitted non-missingness probabilities ``1 - exp(-lam)``."""
    resid = np.asarray(y, dtype=float) - predicted_means(hpf, dm, link, rows, cols, mean_link)
    return resid, -np.expm1(-expected_rates(hpf, rows, cols))


def verify_theorem2(
    family: EdmFamily,
    theta: float,
    kappa: float,
    link: Linkage,
    lambda_grid,
    n_samples: int,
    rng: np.random.Generator,
) -> list[tuple[float, float]]:
    """KS distance between compound draws and direct ``p(theta, kappa)`` draws for each rate.

    Every rate reuses the same seeds, so the samples differ across the grid
    only through the count and the terms it adds.  For a non-trivial linkage
    the reference sample is ``Y0 + Y1`` built from the same streams as the
    compound draws (the compound with every count set to one), which has law
    ``p(theta, kappa)`` by additivity; the distance then isolates the effect of
    the extra terms instead of two-sample noise.  With ``c = 0`` or the
    ignorable linkage the reference is an independent direct sample.
    """
    base = EdmParams(family, theta, kappa)
    seed = int(rng.integers(2**63))
    if link.ignorable or link.c == 0.0:
        direct = sample_natural(base.family, base.theta, base.kappa, np.random.default_rng([seed, 1]), n_samples)
    else:
        _, direct = compound_sample(link, base, 1.0, np.random.default_rng([seed, 0]), n_samples, counts=1)
    out = []
    for lam in lambda_grid:
        _, y = compound_sample(link, base, float(lam), np.random.default_rng([seed, 0]), n_samples)
        out.append((float(lam), float(stats.ks_2samp(y, direct, method="asymp").statistic)))
    return out
