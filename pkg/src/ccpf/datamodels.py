"""
Data-generating models coupled to the missingness model.

Each model exposes stochastic updates whose targets are the natural-gradient
fixed points computed from a set of cells.  With a single sampled cell and
``scale`` equal to the number of cells the sum runs over, these are the SVI
updates; with every cell of a row (or column) and ``scale=1`` they are exact
coordinate-ascent updates, which is what the fixed-point checks use.

Gaussian models use two linkage channels: ``phi1`` scales the mean and
``phi2`` the variance, entering the updates through the ratio statistics
``E[phi1/phi2]``, ``E[phi1**2/phi2]`` and ``E[1/phi2]``.  Poisson models
scale their rate by a single ``phi`` and use ``E[phi]``.
"""

from __future__ import annotations

import enum
import math
from typing import NamedTuple

import numpy as np
from scipy import special

from .edm import EdmFamily, log_partition, log_partition_d1, mean_to_theta
from .errors import ParameterDomainError, SupportError
from .missingness import PhiStats, softmax


class DataModelKind(str, enum.Enum):
    GAUSSIAN_ELEMENT = "gaussian_element"
    GMM = "gmm"
    PMM = "pmm"
    PMF = "pmf"
    HPF_DATA = "hpf_data"
    HIER_LINREG = "hier_linreg"


class GaussianMoments(NamedTuple):
    """Posterior moments of the mean and precision of a Gaussian cell."""

    mean: float
    second_moment: float
    precision: float
    log_precision: float


class PoissonMoments(NamedTuple):
    rate: float
    log_rate: float


class EdmPoint(NamedTuple):
    theta: float
    kappa: float


def _blend(current, target, lr):
    return current + lr * (target - current)


def _cells(idx, y):
    idx = np.atleast_1d(np.asarray(idx, dtype=np.int64))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if idx.shape != y.shape:
        raise ValueError("index and value arrays differ in length")
    return idx, y


def _ratios(stats, n):
    """Broadcast per-cell ratio statistics to three arrays of length ``n``."""
    if isinstance(stats, PhiStats):
        return np.full(n, stats.ratio), np.full(n, stats.sq_ratio), np.full(n, stats.inv)
    r = np.asarray(stats, dtype=float)
    if r.ndim == 1:
        return np.full(n, r[0]), np.full(n, r[1]), np.full(n, r[2])
    return r[:, 0], r[:, 1], r[:, 2]


def _means(stats, n):
    if isinstance(stats, PhiStats):
        return np.full(n, stats.mean)
    return np.broadcast_to(np.asarray(stats, dtype=float), (n,))


def _check_counts_data(y):
    if np.any(y < 0) or np.any(np.floor(y) != y):
        raise SupportError("Poisson data models need non-negative integer observations")


class DataModel:
    """Shared plumbing: step counters, scales and (de)serialisation."""

    kind: DataModelKind
    channel: str  # "gaussian", "poisson" or "edm"
    kappa_free: bool = False
    _arrays: tuple[str, ...] = ()
    _meta: tuple[str, ...] = ()

    row_counts: np.ndarray
    col_counts: np.ndarray
    n_obs: int

    def set_counts(self, rows, cols, n_rows, n_cols):
        """Record how many training cells each row and column holds (the SVI scales)."""
        self.row_counts = np.bincount(rows, minlength=n_rows).astype(float)
        self.col_counts = np.bincount(cols, minlength=n_cols).astype(float)
        self.n_obs = int(len(rows))

    @property
    def family(self) -> EdmFamily:
        return EdmFamily.GAUSSIAN if self.channel == "gaussian" else EdmFamily.POISSON

    @property
    def kappa(self) -> float:
        return 1.0

    @kappa.setter
    def kappa(self, value):
        raise ParameterDomainError(f"{self.kind.value} has no free dispersion")

    @property
    def dispersion(self) -> float:
        """Point estimate of the dispersion reported after training."""
        return self.kappa

    def arrays(self) -> dict[str, np.ndarray]:
        out = {name: getattr(self, name) for name in self._arrays}
        out["row_counts"] = self.row_counts
        out["col_counts"] = self.col_counts
        return out

    def meta(self) -> dict:
        out = {"kind": self.kind.value, "n_obs": self.n_obs}
        for name in self._meta:
            v = getattr(self, name)
            out[name] = v.value if isinstance(v, enum.Enum) else v
        return out

    @classmethod
    def restore(cls, meta: dict, arrays: dict) -> "DataModel":
        obj = cls.__new__(cls)
        for name in cls._meta:
            setattr(obj, name, meta[name])
        for name in cls._arrays:
            setattr(obj, name, np.array(arrays[name]))
        obj.row_counts = np.array(arrays["row_counts"])
        obj.col_counts = np.array(arrays["col_counts"])
        obj.n_obs = int(meta["n_obs"])
        obj._post_restore()
        return obj

    def _post_restore(self):
        pass

    def copy(self) -> "DataModel":
        return type(self).restore(self.meta(), {k: v.copy() for k, v in self.arrays().items()})

    # subclasses implement the following

    def local_stats(self, i: int, j: int):
        raise NotImplementedError

    def svi_step(self, i: int, j: int, y: float, stats: PhiStats, xi: float):
        raise NotImplementedError

    def sweep(self, rows, cols, y, stats):
        """One exact coordinate-ascent pass (``lr = 1``, unit scale) over the given cells."""
        raise NotImplementedError

    def residual(self, rows, cols, y, stats) -> float:
        """Largest gap between any parameter and its coordinate-ascent target."""
        raise NotImplementedError

    def predict(self, rows, cols) -> dict:
        """Point predictive parameters for paired index arrays."""
        raise NotImplementedError


def _lr(counter, xi):
    return float(counter) ** -xi


def _group_cells(groups, other, y, stats):
    """Yield ``(group, other_idx, y, stats)`` for each distinct group."""
    groups = np.asarray(groups)
    order = np.argsort(groups, kind="stable")
    bounds = np.flatnonzero(np.diff(groups[order])) + 1
    for chunk in np.split(order, bounds):
        if chunk.size:
            yield int(groups[chunk[0]]), np.asarray(other)[chunk], np.asarray(y)[chunk], _take(stats, chunk)


def _take(stats, idx):
    if isinstance(stats, PhiStats):
        return stats
    arr = np.asarray(stats)
    return arr[idx]


# ---------------------------------------------------------------------------
# Gaussian element with a Normal-Gamma prior


class GaussianElement(DataModel):
    """``y ~ N(phi1 mu, phi2 / prec)`` with ``mu ~ N(prior_mean, 1/(prior_strength prec))``
    and ``prec ~ Ga(prec_shape, prec_rate)``.

    Variational posterior ``N(mu_hat, var_hat) x Ga(a_hat, b_hat)``.
    """

    kind = DataModelKind.GAUSSIAN_ELEMENT
    channel = "gaussian"
    _arrays = ("params", "t")
    _meta = ("prior_mean", "prior_strength", "prec_shape", "prec_rate")

    def __init__(self, prior_mean=0.0, prior_strength=1.0, prec_shape=1.0, prec_rate=1.0, t0=1):
        self.prior_mean = float(prior_mean)
        self.prior_strength = float(prior_strength)
        self.prec_shape = float(prec_shape)
        self.prec_rate = float(prec_rate)
        if self.prior_strength < 0 or self.prec_shape <= 0 or self.prec_rate <= 0:
            raise ParameterDomainError("Normal-Gamma hyperparameters must be positive")
        # mu_hat, var_hat, a_hat, b_hat
        self.params = np.array([self.prior_mean, self.prec_rate / self.prec_shape, self.prec_shape, self.prec_rate])
        self.t = np.array([t0], dtype=np.int64)

    mu_hat = property(lambda self: self.params[0])
    var_hat = property(lambda self: self.params[1])
    a_hat = property(lambda self: self.params[2])
    b_hat = property(lambda self: self.params[3])

    @property
    def dispersion(self):
        return float(self.b_hat / self.a_hat)

    def local_stats(self, i, j) -> GaussianMoments:
        mu, var, a, b = self.params
        return GaussianMoments(mu, mu * mu + var, a / b, special.digamma(a) - math.log(b))

    def _sums(self, y, stats, scale):
        r1, r2, rinv = _ratios(stats, y.size)
        return scale * np.sum(y * r1), scale * np.sum(r2), scale * np.sum(y * y * rinv), scale * y.size

    def _target(self, name, sums):
        sy, s2, syy, ncell = sums
        mu, var, a, b = self.params
        lam, eta = self.prior_strength, self.prior_mean
        if name == 0:
            return (eta * lam + sy) / (lam + s2)
        if name == 1:
            return b / (a * (lam + s2))
        if name == 2:
            return self.prec_shape + (1.0 + ncell) / 2.0
        return (
            self.prec_rate
            + 0.5 * syy
            + 0.5 * eta * eta * lam
            - mu * (sy + eta * lam)
            + 0.5 * (mu * mu + var) * (s2 + lam)
        )

    def update(self, y, stats, scale, lr):
        """Sequential blend of ``mu_hat``, ``var_hat``, ``a_hat``, ``b_hat``."""
        y = np.atleast_1d(np.asarray(y, dtype=float))
        sums = self._sums(y, stats, scale)
        for k in range(4):
            self.params[k] = _blend(self.params[k], self._target(k, sums), lr)
        return self

    def svi_step(self, i, j, y, stats, xi):
        self.update(y, stats, self.n_obs, _lr(self.t[0], xi))
        self.t[0] += 1

    def sweep(self, rows, cols, y, stats):
        self.update(np.asarray(y, dtype=float), stats, 1.0, 1.0)

    def residual(self, rows, cols, y, stats):
        sums = self._sums(np.asarray(y, dtype=float), stats, 1.0)
        return max(abs(self._target(k, sums) - self.params[k]) for k in range(4))

    def predict(self, rows, cols):
        n = len(rows)
        return {"mean": np.full(n, self.mu_hat), "var": np.full(n, self.dispersion)}


# ---------------------------------------------------------------------------
# Point-estimate element for any EDM family


class EdmElement(DataModel):
    """``y ~ p(theta, phi(n) kappa)`` with a single point-estimated ``theta``.

    ``theta`` solves ``kappa E[phi] Psi'(theta) = y`` in running averages of
    ``y`` and ``E[phi]`` maintained with the SVI step sizes.
    """

    kind = DataModelKind.GAUSSIAN_ELEMENT
    channel = "edm"
    kappa_free = True
    _arrays = ("params", "t")
    _meta = ("edm_family",)

    def __init__(self, family, y_mean, kappa=1.0, t0=1):
        self.edm_family = EdmFamily(family).value
        # theta, kappa, running mean of y, running mean of E[phi]
        self.params = np.array([0.0, float(kappa), float(y_mean), 1.0])
        self.params[0] = self._solve()
        self.t = np.array([t0], dtype=np.int64)

    @property
    def family(self):
        return EdmFamily(self.edm_family)

    @property
    def theta(self):
        return float(self.params[0])

    @property
    def kappa(self):
        return float(self.params[1])

    @kappa.setter
    def kappa(self, value):
        self.params[1] = value
        self.params[0] = self._solve()

    def _solve(self):
        return float(mean_to_theta(self.family, self.params[2] / (self.params[1] * self.params[3])))

    def meta(self):
        return {"kind": "edm_element", "n_obs": self.n_obs, "edm_family": self.edm_family}

    def local_stats(self, i, j) -> EdmPoint:
        return EdmPoint(self.theta, self.kappa)

    def update(self, y, stats, lr):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        ephi = _means(stats, y.size)
        self.params[2] = _blend(self.params[2], y.mean(), lr)
        self.params[3] = _blend(self.params[3], ephi.mean(), lr)
        self.params[0] = self._solve()
        return self

    def svi_step(self, i, j, y, stats, xi):
        self.update(y, stats, _lr(self.t[0], xi))
        self.t[0] += 1

    def sweep(self, rows, cols, y, stats):
        self.update(y, stats, 1.0)

    def residual(self, rows, cols, y, stats):
        y = np.asarray(y, dtype=float)
        ephi = _means(stats, y.size)
        mean = self.kappa * ephi.mean() * log_partition_d1(self.family, self.theta)
        return abs(mean - y.mean())

    def predict(self, rows, cols):
        return {"theta": np.full(len(rows), self.theta), "kappa": self.kappa}


# ---------------------------------------------------------------------------
# Gaussian mixture (additive components)


class GMM(DataModel):
    """``y_ui ~ N(phi1 sum_k s_uk, phi2 sigma2)`` with ``s_uk ~ N(prior_mean, prior_var)``.

    ``axis`` picks whether the groups ``u`` are rows or columns.
    """

    kind = DataModelKind.GMM
    channel = "gaussian"
    kappa_free = True
    _arrays = ("loc_mean", "loc_var", "t_group", "sigma2_arr")
    _meta = ("prior_mean", "prior_var", "axis")

    def __init__(self, n_groups, K, prior_mean, prior_var, sigma2, rng, axis="rows", t0=1):
        self.prior_mean = float(prior_mean)
        self.prior_var = float(prior_var)
        self.axis = axis
        self.loc_mean = prior_mean + 0.01 * math.sqrt(prior_var) * rng.standard_normal((n_groups, K))
        self.loc_var = np.full((n_groups, K), float(prior_var))
        self.t_group = np.full(n_groups, t0, dtype=np.int64)
        self.sigma2_arr = np.array([float(sigma2)])

    @property
    def kappa(self):
        return float(self.sigma2_arr[0])

    @kappa.setter
    def kappa(self, value):
        self.sigma2_arr[0] = value

    def _group(self, i, j):
        return (i, j) if self.axis == "rows" else (j, i)

    def local_stats(self, i, j):
        u, _ = self._group(i, j)
        m = self.loc_mean[u].sum()
        return GaussianMoments(m, m * m + self.loc_var[u].sum(), 1.0 / self.kappa, -math.log(self.kappa))

    def _target(self, u, k, y, r1, r2, scale):
        s2, eta, rho = self.kappa, self.prior_mean, self.prior_var
        others = self.loc_mean[u].sum() - self.loc_mean[u, k]
        den = s2 + rho * scale * r1.sum()
        num = eta * s2 + rho * scale * np.sum(r1 * y) - rho * scale * np.sum(r2) * others
        return num / den, rho * s2 / den

    def update_group(self, u, y, stats, scale, lr):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        r1, r2, _ = _ratios(stats, y.size)
        for k in range(self.loc_mean.shape[1]):
            a, b = self._target(u, k, y, r1, r2, scale)
            self.loc_mean[u, k] = _blend(self.loc_mean[u, k], a, lr)
            self.loc_var[u, k] = _blend(self.loc_var[u, k], b, lr)
        return self

    def _scale(self, u):
        counts = self.row_counts if self.axis == "rows" else self.col_counts
        return counts[u]

    def svi_step(self, i, j, y, stats, xi):
        u, _ = self._group(i, j)
        self.update_group(u, y, stats, self._scale(u), _lr(self.t_group[u], xi))
        self.t_group[u] += 1

    def _by_group(self, rows, cols, y, stats):
        groups, other = (rows, cols) if self.axis == "rows" else (cols, rows)
        return _group_cells(groups, other, y, stats)

    def sweep(self, rows, cols, y, stats):
        for u, _, yy, ss in self._by_group(rows, cols, y, stats):
            self.update_group(u, yy, ss, 1.0, 1.0)

    def residual(self, rows, cols, y, stats):
        worst = 0.0
        for u, _, yy, ss in self._by_group(rows, cols, y, stats):
            r1, r2, _ = _ratios(ss, yy.size)
            for k in range(self.loc_mean.shape[1]):
                a, b = self._target(u, k, yy, r1, r2, 1.0)
                worst = max(worst, abs(a - self.loc_mean[u, k]), abs(b - self.loc_var[u, k]))
        return worst

    def predict(self, rows, cols):
        groups = np.asarray(rows if self.axis == "rows" else cols)
        return {"mean": self.loc_mean[groups].sum(axis=1), "var": np.full(len(groups), self.kappa)}


# ---------------------------------------------------------------------------
# Poisson mixture (additive components)


class PMM(DataModel):
    """``y_ui ~ Po(phi sum_k s_uk)`` with ``s_uk ~ Ga(prior_shape, prior_rate)``."""

    kind = DataModelKind.PMM
    channel = "poisson"
    _arrays = ("shape", "rate", "t_group")
    _meta = ("prior_shape", "prior_rate", "axis")

    def __init__(self, n_groups, K, prior_shape, prior_rate, rng, axis="rows", t0=1):
        self.prior_shape = float(prior_shape)
        self.prior_rate = float(prior_rate)
        self.axis = axis
        self.shape = prior_shape * (1.0 + 0.05 * rng.uniform(-1, 1, (n_groups, K)))
        self.rate = prior_rate * (1.0 + 0.05 * rng.uniform(-1, 1, (n_groups, K)))
        self.t_group = np.full(n_groups, t0, dtype=np.int64)

    def _group(self, i, j):
        return i if self.axis == "rows" else j

    def local_stats(self, i, j):
        u = self._group(i, j)
        rate = float((self.shape[u] / self.rate[u]).sum())
        return PoissonMoments(rate, math.log(rate))

    def responsibilities(self, u):
        return softmax(special.digamma(self.shape[u]) - np.log(self.rate[u]))

    def _targets(self, u, y, ephi, scale):
        resp = self.responsibilities(u)
        return self.prior_shape + scale * resp * y.sum(), self.prior_rate + scale * ephi.sum()

    def update_group(self, u, y, stats, scale, lr):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        _check_counts_data(y)
        a, b = self._targets(u, y, _means(stats, y.size), scale)
        self.shape[u] = _blend(self.shape[u], a, lr)
        self.rate[u] = _blend(self.rate[u], b, lr)
        return self

    def _scale(self, u):
        counts = self.row_counts if self.axis == "rows" else self.col_counts
        return counts[u]

    def svi_step(self, i, j, y, stats, xi):
        u = self._group(i, j)
        self.update_group(u, y, stats, self._scale(u), _lr(self.t_group[u], xi))
        self.t_group[u] += 1

    def _by_group(self, rows, cols, y, stats):
        groups, other = (rows, cols) if self.axis == "rows" else (cols, rows)
        return _group_cells(groups, other, y, stats)

    def sweep(self, rows, cols, y, stats):
        for u, _, yy, ss in self._by_group(rows, cols, y, stats):
            self.update_group(u, yy, ss, 1.0, 1.0)

    def residual(self, rows, cols, y, stats):
        worst = 0.0
        for u, _, yy, ss in self._by_group(rows, cols, y, stats):
            a, b = self._targets(u, yy, _means(ss, yy.size), 1.0)
            worst = max(worst, np.abs(a - self.shape[u]).max(), np.abs(b - self.rate[u]).max())
        return worst

    def predict(self, rows, cols):
        groups = np.asarray(rows if self.axis == "rows" else cols)
        return {"rate": (self.shape[groups] / self.rate[groups]).sum(axis=1)}


# ---------------------------------------------------------------------------
# Probabilistic matrix factorization


class PMF(DataModel):
    """``y_ui ~ N(phi1 sum_k s_uk v_ik, phi2 sigma2)`` with Gaussian factors.

    ``s_uk ~ N(row_prior_mean, row_prior_var)``, ``v_ik ~ N(col_prior_mean, col_prior_var)``.
    """

    kind = DataModelKind.PMF
    channel = "gaussian"
    kappa_free = True
    _arrays = ("row_mean", "row_var", "col_mean", "col_var", "t_row", "t_col", "sigma2_arr")
    _meta = ("row_prior_mean", "row_prior_var", "col_prior_mean", "col_prior_var")

    def __init__(self, n_rows, n_cols, K, row_prior_mean, row_prior_var, col_prior_mean, col_prior_var, sigma2, rng, t0=1):
        self.row_prior_mean = float(row_prior_mean)
        self.row_prior_var = float(row_prior_var)
        self.col_prior_mean = float(col_prior_mean)
        self.col_prior_var = float(col_prior_var)
        self.row_mean = row_prior_mean + 0.01 * math.sqrt(row_prior_var) * rng.standard_normal((n_rows, K))
        self.row_var = np.full((n_rows, K), float(row_prior_var))
        self.col_mean = col_prior_mean + 0.01 * math.sqrt(col_prior_var) * rng.standard_normal((n_cols, K))
        self.col_var = np.full((n_cols, K), float(col_prior_var))
        self.t_row = np.full(n_rows, t0, dtype=np.int64)
        self.t_col = np.full(n_cols, t0, dtype=np.int64)
        self.sigma2_arr = np.array([float(sigma2)])

    @property
    def kappa(self):
        return float(self.sigma2_arr[0])

    @kappa.setter
    def kappa(self, value):
        self.sigma2_arr[0] = value

    def local_stats(self, i, j):
        a, b = self.row_mean[i], self.row_var[i]
        c, d = self.col_mean[j], self.col_var[j]
        m = float(a @ c)
        var = float(np.sum((b + a * a) * (d + c * c) - a * a * c * c))
        return GaussianMoments(m, m * m + var, 1.0 / self.kappa, -math.log(self.kappa))

    @staticmethod
    def _side_target(own_mean, other_mean, other_var, k, y, r1, r2, scale, prior_mean, prior_var, s2):
        # own_mean: (K,), other_mean/other_var: (cells, K)
        dots = other_mean @ own_mean
        others = dots - own_mean[k] * other_mean[:, k]
        resid = r1 * y - r2 * others
        num = prior_mean * s2 + prior_var * scale * np.sum(other_mean[:, k] * resid)
        den = s2 + prior_var * scale * np.sum(r1 * (other_var[:, k] + other_mean[:, k] ** 2))
        return num / den, prior_var * s2 / den

    def update_row(self, u, cols, y, stats, scale, lr):
        cols, y = _cells(cols, y)
        r1, r2, _ = _ratios(stats, y.size)
        cm, cv = self.col_mean[cols], self.col_var[cols]
        for k in range(self.row_mean.shape[1]):
            a, b = self._side_target(self.row_mean[u], cm, cv, k, y, r1, r2, scale,
                                     self.row_prior_mean, self.row_prior_var, self.kappa)
            self.row_mean[u, k] = _blend(self.row_mean[u, k], a, lr)
            self.row_var[u, k] = _blend(self.row_var[u, k], b, lr)
        return self

    def update_col(self, i, rows, y, stats, scale, lr):
        rows, y = _cells(rows, y)
        r1, r2, _ = _ratios(stats, y.size)
        rm, rv = self.row_mean[rows], self.row_var[rows]
        for k in range(self.col_mean.shape[1]):
            a, b = self._side_target(self.col_mean[i], rm, rv, k, y, r1, r2, scale,
                                     self.col_prior_mean, self.col_prior_var, self.kappa)
            self.col_mean[i, k] = _blend(self.col_mean[i, k], a, lr)
            self.col_var[i, k] = _blend(self.col_var[i, k], b, lr)
        return self

    def svi_step(self, i, j, y, stats, xi):
        self.update_row(i, j, y, stats, self.row_counts[i], _lr(self.t_row[i], xi))
        self.update_col(j, i, y, stats, self.col_counts[j], _lr(self.t_col[j], xi))
        self.t_row[i] += 1
        self.t_col[j] += 1

    def sweep(self, rows, cols, y, stats):
        for u, cc, yy, ss in _group_cells(rows, cols, y, stats):
            self.update_row(u, cc, yy, ss, 1.0, 1.0)
        for i, rr, yy, ss in _group_cells(cols, rows, y, stats):
            self.update_col(i, rr, yy, ss, 1.0, 1.0)

    def residual(self, rows, cols, y, stats):
        worst = 0.0
        K = self.row_mean.shape[1]
        for u, cc, yy, ss in _group_cells(rows, cols, y, stats):
            r1, r2, _ = _ratios(ss, yy.size)
            for k in range(K):
                a, b = self._side_target(self.row_mean[u], self.col_mean[cc], self.col_var[cc], k, yy, r1, r2, 1.0,
                                         self.row_prior_mean, self.row_prior_var, self.kappa)
                worst = max(worst, abs(a - self.row_mean[u, k]), abs(b - self.row_var[u, k]))
        for i, rr, yy, ss in _group_cells(cols, rows, y, stats):
            r1, r2, _ = _ratios(ss, yy.size)
            for k in range(K):
                a, b = self._side_target(self.col_mean[i], self.row_mean[rr], self.row_var[rr], k, yy, r1, r2, 1.0,
                                         self.col_prior_mean, self.col_prior_var, self.kappa)
                worst = max(worst, abs(a - self.col_mean[i, k]), abs(b - self.col_var[i, k]))
        return worst

    def predict(self, rows, cols):
        m = np.einsum("ck,ck->c", self.row_mean[rows], self.col_mean[cols])
        return {"mean": m, "var": np.full(len(m), self.kappa)}


# ---------------------------------------------------------------------------
# Poisson factorization of the observed values


class HPFData(DataModel):
    """``y_ui ~ Po(phi sum_k s_uk v_ik)`` with gamma factors."""

    kind = DataModelKind.HPF_DATA
    channel = "poisson"
    _arrays = ("row_shape", "row_rate", "col_shape", "col_rate", "t_row", "t_col")
    _meta = ("row_prior_shape", "row_prior_rate", "col_prior_shape", "col_prior_rate")

    def __init__(self, n_rows, n_cols, K, row_prior_shape, row_prior_rate, col_prior_shape, col_prior_rate, rng, t0=1):
        self.row_prior_shape = float(row_prior_shape)
        self.row_prior_rate = float(row_prior_rate)
        self.col_prior_shape = float(col_prior_shape)
        self.col_prior_rate = float(col_prior_rate)

        def jitter(shape):
            return 1.0 + 0.05 * rng.uniform(-1, 1, shape)

        self.row_shape = row_prior_shape * jitter((n_rows, K))
        self.row_rate = row_prior_rate * jitter((n_rows, K))
        self.col_shape = col_prior_shape * jitter((n_cols, K))
        self.col_rate = col_prior_rate * jitter((n_cols, K))
        self.t_row = np.full(n_rows, t0, dtype=np.int64)
        self.t_col = np.full(n_cols, t0, dtype=np.int64)

    def local_stats(self, i, j):
        rate = float((self.row_shape[i] / self.row_rate[i]) @ (self.col_shape[j] / self.col_rate[j]))
        return PoissonMoments(rate, math.log(rate))

    def allocations(self, rows, cols):
        """Per-cell multinomial allocation over the K components, shape ``(cells, K)``."""
        score = (
            special.digamma(self.row_shape[rows]) - np.log(self.row_rate[rows])
            + special.digamma(self.col_shape[cols]) - np.log(self.col_rate[cols])
        )
        return softmax(score, axis=-1)

    def _row_targets(self, u, cols, y, weight, scale):
        alloc = self.allocations(np.full(cols.size, u), cols)
        ev = self.col_shape[cols] / self.col_rate[cols]
        a = self.row_prior_shape + scale * (y[:, None] * alloc).sum(axis=0)
        b = self.row_prior_rate + scale * (weight[:, None] * ev).sum(axis=0)
        return a, b

    def _col_targets(self, i, rows, y, weight, scale):
        alloc = self.allocations(rows, np.full(rows.size, i))
        eu = self.row_shape[rows] / self.row_rate[rows]
        a = self.col_prior_shape + scale * (y[:, None] * alloc).sum(axis=0)
        b = self.col_prior_rate + scale * (weight[:, None] * eu).sum(axis=0)
        return a, b

    def update_row(self, u, cols, y, stats, scale, lr):
        """``stats`` supplies the expected rate multiplier of each cell (``E[phi]``)."""
        cols, y = _cells(cols, y)
        _check_counts_data(y)
        a, b = self._row_targets(u, cols, y, _means(stats, y.size), scale)
        self.row_shape[u] = _blend(self.row_shape[u], a, lr)
        self.row_rate[u] = _blend(self.row_rate[u], b, lr)
        return self

    def update_col(self, i, rows, y, stats, scale, lr):
        rows, y = _cells(rows, y)
        _check_counts_data(y)
        a, b = self._col_targets(i, rows, y, _means(stats, y.size), scale)
        self.col_shape[i] = _blend(self.col_shape[i], a, lr)
        self.col_rate[i] = _blend(self.col_rate[i], b, lr)
        return self

    def svi_step(self, i, j, y, stats, xi):
        # the allocation is computed once, before either side moves
        cols, yy = _cells(j, y)
        _check_counts_data(yy)
        alloc = self.allocations(np.array([i]), cols)[0]
        weight = _means(stats, 1)
        lr_u, lr_i = _lr(self.t_row[i], xi), _lr(self.t_col[j], xi)
        su, si = self.row_counts[i], self.col_counts[j]
        ev = self.col_shape[j] / self.col_rate[j]
        self.row_shape[i] = _blend(self.row_shape[i], self.row_prior_shape + su * yy[0] * alloc, lr_u)
        self.row_rate[i] = _blend(self.row_rate[i], self.row_prior_rate + su * weight[0] * ev, lr_u)
        eu = self.row_shape[i] / self.row_rate[i]
        self.col_shape[j] = _blend(self.col_shape[j], self.col_prior_shape + si * yy[0] * alloc, lr_i)
        self.col_rate[j] = _blend(self.col_rate[j], self.col_prior_rate + si * weight[0] * eu, lr_i)
        self.t_row[i] += 1
        self.t_col[j] += 1

    def sweep(self, rows, cols, y, stats):
        for u, cc, yy, ss in _group_cells(rows, cols, y, stats):
            self.update_row(u, cc, yy, ss, 1.0, 1.0)
        for i, rr, yy, ss in _group_cells(cols, rows, y, stats):
            self.update_col(i, rr, yy, ss, 1.0, 1.0)

    def residual(self, rows, cols, y, stats):
        worst = 0.0
        for u, cc, yy, ss in _group_cells(rows, cols, y, stats):
            a, b = self._row_targets(u, cc, yy, _means(ss, yy.size), 1.0)
            worst = max(worst, np.abs(a - self.row_shape[u]).max(), np.abs(b - self.row_rate[u]).max())
        for i, rr, yy, ss in _group_cells(cols, rows, y, stats):
            a, b = self._col_targets(i, rr, yy, _means(ss, yy.size), 1.0)
            worst = max(worst, np.abs(a - self.col_shape[i]).max(), np.abs(b - self.col_rate[i]).max())
        return worst

    def predict(self, rows, cols):
        rate = np.einsum("ck,ck->c", self.row_shape[rows] / self.row_rate[rows], self.col_shape[cols] / self.col_rate[cols])
        return {"rate": rate}


# ---------------------------------------------------------------------------
# Hierarchical linear regression on column covariates


class HierLinReg(DataModel):
    """``y_ui ~ N(phi1 sum_k s_uk x_ik, phi2 sigma2)`` with ``s_uk ~ N(prior_mean_k, prior_var)``.

    ``covariates`` is the ``(n_cols, K)`` matrix ``x``.
    """

    kind = DataModelKind.HIER_LINREG
    channel = "gaussian"
    kappa_free = True
    _arrays = ("coef_mean", "coef_var", "covariates", "prior_mean", "t_row", "sigma2_arr")
    _meta = ("prior_var",)

    def __init__(self, n_rows, covariates, prior_mean, prior_var, sigma2, rng, t0=1):
        self.covariates = np.asarray(covariates, dtype=float)
        K = self.covariates.shape[1]
        self.prior_mean = np.broadcast_to(np.asarray(prior_mean, dtype=float), (K,)).copy()
        self.prior_var = float(prior_var)
        self.coef_mean = self.prior_mean + 0.01 * math.sqrt(prior_var) * rng.standard_normal((n_rows, K))
        self.coef_var = np.full((n_rows, K), float(prior_var))
        self.t_row = np.full(n_rows, t0, dtype=np.int64)
        self.sigma2_arr = np.array([float(sigma2)])

    @property
    def kappa(self):
        return float(self.sigma2_arr[0])

    @kappa.setter
    def kappa(self, value):
        self.sigma2_arr[0] = value

    def local_stats(self, i, j):
        x = self.covariates[j]
        m = float(self.coef_mean[i] @ x)
        return GaussianMoments(m, m * m + float(self.coef_var[i] @ (x * x)), 1.0 / self.kappa, -math.log(self.kappa))

    def _target(self, u, k, x, y, r1, r2, scale):
        s2, rho = self.kappa, self.prior_var
        others = x @ self.coef_mean[u] - self.coef_mean[u, k] * x[:, k]
        num = self.prior_mean[k] * s2 + rho * scale * np.sum((r1 * y - r2 * others) * x[:, k])
        den = s2 + rho * scale * np.sum(r1 * x[:, k] ** 2)
        return num / den, rho * s2 / den

    def update_row(self, u, cols, y, stats, scale, lr):
        cols, y = _cells(cols, y)
        x = self.covariates[cols]
        if x.shape[1] != self.coef_mean.shape[1]:
            raise ValueError("covariate length does not match the number of coefficients")
        r1, r2, _ = _ratios(stats, y.size)
        for k in range(self.coef_mean.shape[1]):
            a, b = self._target(u, k, x, y, r1, r2, scale)
            self.coef_mean[u, k] = _blend(self.coef_mean[u, k], a, lr)
            self.coef_var[u, k] = _blend(self.coef_var[u, k], b, lr)
        return self

    def svi_step(self, i, j, y, stats, xi):
        self.update_row(i, j, y, stats, self.row_counts[i], _lr(self.t_row[i], xi))
        self.t_row[i] += 1

    def sweep(self, rows, cols, y, stats):
        for u, cc, yy, ss in _group_cells(rows, cols, y, stats):
            self.update_row(u, cc, yy, ss, 1.0, 1.0)

    def residual(self, rows, cols, y, stats):
        worst = 0.0
        for u, cc, yy, ss in _group_cells(rows, cols, y, stats):
            r1, r2, _ = _ratios(ss, yy.size)
            x = self.covariates[cc]
            for k in range(self.coef_mean.shape[1]):
                a, b = self._target(u, k, x, yy, r1, r2, 1.0)
                worst = max(worst, abs(a - self.coef_mean[u, k]), abs(b - self.coef_var[u, k]))
        return worst

    def predict(self, rows, cols):
        m = np.einsum("ck,ck->c", self.coef_mean[rows], self.covariates[cols])
        return {"mean": m, "var": np.full(len(m), self.kappa)}


# ---------------------------------------------------------------------------
# functional entry points


def expected_log_partition(model: DataModel, i: int, j: int):
    """Posterior expectation of the log-partition statistics for cell ``(i, j)``.

    Poisson models return ``E[lambda_ij]`` (the log-partition of the Poisson
    is ``exp(theta) = lambda``).  Gaussian models return the
    :class:`GaussianMoments` of the cell mean and precision, from which
    ``E[theta]`` and ``E[theta**2]`` follow.  The point-estimate element
    returns ``Psi(theta)``.
    """
    stats = model.local_stats(i, j)
    if isinstance(stats, PoissonMoments):
        return stats.rate
    if isinstance(stats, EdmPoint):
        return float(log_partition(model.family, stats.theta))
    return stats


def update_gmm(model: GMM, u, i, y, ratio_stats, lr, scale=None):
    scale = model._scale(u) if scale is None else scale
    return model.update_group(u, y, ratio_stats, scale, lr)


def update_pmm(model: PMM, u, i, y, expected_phi, lr, scale=None):
    scale = model._scale(u) if scale is None else scale
    return model.update_group(u, y, expected_phi, scale, lr)


def update_pmf(model: PMF, u, i, y, ratio_stats, lr_u, lr_i=None, row_scale=None, col_scale=None):
    lr_i = lr_u if lr_i is None else lr_i
    model.update_row(u, i, y, ratio_stats, model.row_counts[u] if row_scale is None else row_scale, lr_u)
    model.update_col(i, u, y, ratio_stats, model.col_counts[i] if col_scale is None else col_scale, lr_i)
    return model


def update_hpf_data(model: HPFData, u, i, y, expected_n, lr_u, lr_i=None, row_scale=None, col_scale=None):
    """``expected_n`` is the expected rate multiplier of the cell.

    Under the exponential linkage with ``c = 1`` this is ``E[n]``; in general
    the trainer passes ``E[phi(n)]``.
    """
    lr_i = lr_u if lr_i is None else lr_i
    model.update_row(u, i, y, expected_n, model.row_counts[u] if row_scale is None else row_scale, lr_u)
    model.update_col(i, u, y, expected_n, model.col_counts[i] if col_scale is None else col_scale, lr_i)
    return model


def update_linreg(model: HierLinReg, u, i, y, covariates_row, ratio_stats, lr, scale=None):
    covariates_row = np.asarray(covariates_row, dtype=float)
    if covariates_row.shape != (model.coef_mean.shape[1],):
        raise ValueError(f"expected {model.coef_mean.shape[1]} covariates, got {covariates_row.shape}")
    model.covariates[i] = covariates_row
    return model.update_row(u, i, y, ratio_stats, model.row_counts[u] if scale is None else scale, lr)


def update_gaussian_element(model: GaussianElement, y, ratio_stats, lr, scale=None):
    return model.update(y, ratio_stats, model.n_obs if scale is None else scale, lr)


MODEL_CLASSES = {
    "gaussian_element": GaussianElement,
    "edm_element": EdmElement,
    "gmm": GMM,
    "pmm": PMM,
    "pmf": PMF,
    "hpf_data": HPFData,
    "hier_linreg": HierLinReg,
}


def restore_model(meta: dict, arrays: dict) -> DataModel:
    return MODEL_CLASSES[meta["kind"]].restore(meta, arrays)


def build_model(
    kind: DataModelKind | str,
    rows: np.ndarray,
    cols: np.ndarray,
    y: np.ndarray,
    n_rows: int,
    n_cols: int,
    K: int,
    rng: np.random.Generator,
    t0: int = 1,
    family: EdmFamily | str = EdmFamily.GAUSSIAN,
    covariates: np.ndarray | None = None,
    axis: str = "rows",
) -> DataModel:
    """Construct and initialise a data model from training cells.

    Gaussian-side hyperparameters are set by moment matching: half of the
    sample variance goes to the noise, half to the prior over the mean.
    """
    kind = DataModelKind(kind)
    family = EdmFamily(family)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise ValueError("no training cells")
    ybar = float(y.mean())
    yvar = float(y.var()) if y.size > 1 else 1.0
    yvar = max(yvar, 1e-6)
    half = 0.5 * yvar

    if kind is DataModelKind.GAUSSIAN_ELEMENT and family is not EdmFamily.GAUSSIAN:
        if family.discrete:
            _check_counts_data(y)
        model = EdmElement(family, max(ybar, 1e-3), kappa=1.0, t0=t0)
        if family is EdmFamily.BINOMIAL:
            model.kappa = float(max(1.0, y.max()))
    elif kind is DataModelKind.GAUSSIAN_ELEMENT:
        # E[1/prec] = half the sample variance with a weak (shape 1) prior
        model = GaussianElement(prior_mean=ybar, prior_strength=1.0, prec_shape=1.0, prec_rate=half, t0=t0)
    elif kind is DataModelKind.GMM:
        n_groups = n_rows if axis == "rows" else n_cols
        model = GMM(n_groups, K, ybar / K, half / K, half, rng, axis=axis, t0=t0)
    elif kind is DataModelKind.PMM:
        _check_counts_data(y)
        n_groups = n_rows if axis == "rows" else n_cols
        shape = 0.3
        model = PMM(n_groups, K, shape, K * shape / max(ybar, 1e-3), rng, axis=axis, t0=t0)
    elif kind is DataModelKind.PMF:
        mag = math.sqrt(abs(ybar) / K)
        eta = math.copysign(mag, ybar) if ybar != 0 else 0.0
        s = eta * eta + mag * mag
        prior_var = 0.5 * (-s + math.sqrt(s * s + 2.0 * half / K))
        model = PMF(n_rows, n_cols, K, eta, prior_var, mag, prior_var, half, rng, t0=t0)
    elif kind is DataModelKind.HPF_DATA:
        _check_counts_data(y)
        shape = 0.3
        rate = math.sqrt(K * shape * shape / max(ybar, 1e-3))
        model = HPFData(n_rows, n_cols, K, shape, rate, shape, rate, rng, t0=t0)
    else:
        if covariates is None:
            raise ValueError("hierarchical regression needs a covariate matrix")
        x = np.asarray(covariates, dtype=float)
        if x.shape[0] != n_cols:
            raise ValueError(f"covariates have {x.shape[0]} rows for {n_cols} columns")
        col_sum = np.bincount(cols, weights=y, minlength=n_cols)
        col_n = np.bincount(cols, minlength=n_cols)
        seen = col_n > 0
        target = col_sum[seen] / col_n[seen]
        coef, *_ = np.linalg.lstsq(x[seen], target, rcond=None)
        scale = max(float(np.mean(np.sum(x * x, axis=1))), 1e-12)
        model = HierLinReg(n_rows, x, coef, half / scale, half, rng, t0=t0)

    model.set_counts(rows, cols, n_rows, n_cols)
    return model
