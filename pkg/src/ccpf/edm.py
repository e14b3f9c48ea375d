"""
Additive exponential dispersion models.

Every family is written in the additive form

    p(x; theta, kappa) = exp(x * theta - kappa * Psi(theta) + h(x, kappa))

so that sums of independent draws sharing ``theta`` stay in the family with
their dispersions added.  Six families are supported: Gaussian, gamma,
inverse Gaussian, Poisson, binomial and negative binomial.

All functions broadcast over numpy arrays.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import ParameterDomainError, SupportError

__all__ = [
    "EdmFamily",
    "EdmParams",
    "log_partition",
    "log_partition_d1",
    "log_partition_d2",
    "base_measure",
    "base_measure_dkappa",
    "edm_moments",
    "log_density",
    "log_density_natural",
    "from_standard",
    "to_standard",
    "mean_to_theta",
    "edm_sample",
    "sample_natural",
]


class EdmFamily(str, enum.Enum):
    GAUSSIAN = "gaussian"
    GAMMA = "gamma"
    INVERSE_GAUSSIAN = "inverse_gaussian"
    POISSON = "poisson"
    BINOMIAL = "binomial"
    NEGATIVE_BINOMIAL = "negative_binomial"

    @property
    def discrete(self) -> bool:
        return self in (EdmFamily.POISSON, EdmFamily.BINOMIAL, EdmFamily.NEGATIVE_BINOMIAL)


_NEGATIVE_THETA = (EdmFamily.GAMMA, EdmFamily.INVERSE_GAUSSIAN, EdmFamily.NEGATIVE_BINOMIAL)


def _check_theta(family: EdmFamily, theta):
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ParameterDomainError(f"{family.value}: theta must be finite")
    if family in _NEGATIVE_THETA and np.any(theta >= 0):
        raise ParameterDomainError(f"{family.value}: theta must be negative, got {theta}")
    return theta


def _check_kappa(family: EdmFamily, kappa):
    kappa = np.asarray(kappa, dtype=float)
    if not np.all(np.isfinite(kappa)) or np.any(kappa <= 0):
        raise ParameterDomainError(f"{family.value}: kappa must be positive, got {kappa}")
    return kappa


@dataclass(frozen=True)
class EdmParams:
    """Natural parameter and dispersion of one additive EDM."""

    family: EdmFamily
    theta: float
    kappa: float

    def __post_init__(self):
        object.__setattr__(self, "family", EdmFamily(self.family))
        for name in ("theta", "kappa"):
            if np.ndim(getattr(self, name)) == 0:
                object.__setattr__(self, name, float(getattr(self, name)))
        _check_theta(self.family, self.theta)
        _check_kappa(self.family, self.kappa)

    def with_kappa(self, kappa: float) -> "EdmParams":
        return EdmParams(self.family, self.theta, kappa)


def log_partition(family: EdmFamily, theta):
    """Base log-partition function Psi(theta)."""
    family = EdmFamily(family)
    t = _check_theta(family, theta)
    if family is EdmFamily.GAUSSIAN:
        out = 0.5 * t**2
    elif family is EdmFamily.GAMMA:
        out = -np.log(-t)
    elif family is EdmFamily.INVERSE_GAUSSIAN:
        out = -np.sqrt(-2.0 * t)
    elif family is EdmFamily.POISSON:
        out = np.exp(t)
    elif family is EdmFamily.BINOMIAL:
        out = np.logaddexp(0.0, t)
    else:
        out = -np.log(-np.expm1(t))
    return out[()] if out.ndim == 0 else out


def log_partition_d1(family: EdmFamily, theta):
    """First derivative of Psi (the unit-dispersion mean)."""
    family = EdmFamily(family)
    t = _check_theta(family, theta)
    if family is EdmFamily.GAUSSIAN:
        out = t.copy()
    elif family is EdmFamily.GAMMA:
        out = -1.0 / t
    elif family is EdmFamily.INVERSE_GAUSSIAN:
        out = (-2.0 * t) ** -0.5
    elif family is EdmFamily.POISSON:
        out = np.exp(t)
    elif family is EdmFamily.BINOMIAL:
        out = special.expit(t)
    else:
        out = np.exp(t) / -np.expm1(t)
    return out[()] if out.ndim == 0 else out


def log_partition_d2(family: EdmFamily, theta):
    """Second derivative of Psi (the unit-dispersion variance)."""
    family = EdmFamily(family)
    t = _check_theta(family, theta)
    if family is EdmFamily.GAUSSIAN:
        out = np.ones_like(t)
    elif family is EdmFamily.GAMMA:
        out = 1.0 / t**2
    elif family is EdmFamily.INVERSE_GAUSSIAN:
        out = (-2.0 * t) ** -1.5
    elif family is EdmFamily.POISSON:
        out = np.exp(t)
    elif family is EdmFamily.BINOMIAL:
        s = special.expit(t)
        out = s * (1.0 - s)
    else:
        out = np.exp(t) / np.expm1(t) ** 2
    return out[()] if out.ndim == 0 else out


def edm_moments(params: EdmParams) -> tuple[float, float]:
    """Mean ``kappa * Psi'(theta)`` and variance ``kappa * Psi''(theta)``."""
    mean = params.kappa * log_partition_d1(params.family, params.theta)
    var = params.kappa * log_partition_d2(params.family, params.theta)
    return float(mean), float(var)


def _is_integer(x):
    return np.all(np.floor(x) == x)


def _check_support(family: EdmFamily, x, kappa):
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise SupportError(f"{family.value}: observation must be finite")
    if family in (EdmFamily.GAMMA, EdmFamily.INVERSE_GAUSSIAN):
        if np.any(x <= 0):
            raise SupportError(f"{family.value}: observation must be positive, got {x}")
    elif family.discrete:
        if np.any(x < 0) or not _is_integer(x):
            raise SupportError(f"{family.value}: observation must be a non-negative integer, got {x}")
        if family is EdmFamily.BINOMIAL and np.any(x > np.floor(kappa)):
            raise SupportError(f"binomial: observation {x} exceeds the number of trials {kappa}")
    return x


def base_measure(family: EdmFamily, x, kappa):
    """Log base measure h(x, kappa); assumes ``x`` has already been support checked."""
    family = EdmFamily(family)
    x = np.asarray(x, dtype=float)
    k = np.asarray(kappa, dtype=float)
    if family is EdmFamily.GAUSSIAN:
        out = -(x**2) / (2.0 * k) - 0.5 * np.log(2.0 * np.pi * k)
    elif family is EdmFamily.GAMMA:
        out = (k - 1.0) * np.log(x) - special.gammaln(k)
    elif family is EdmFamily.INVERSE_GAUSSIAN:
        out = -(k**2) / (2.0 * x) + np.log(k) - 0.5 * np.log(2.0 * np.pi * x**3)
    elif family is EdmFamily.POISSON:
        out = special.xlogy(x, k) - special.gammaln(x + 1.0)
    elif family is EdmFamily.BINOMIAL:
        # generalized binomial coefficient so non-integer kappa stays usable
        out = special.gammaln(k + 1.0) - special.gammaln(x + 1.0) - special.gammaln(k - x + 1.0)
    else:
        out = special.gammaln(x + k) - special.gammaln(x + 1.0) - special.gammaln(k)
    return out[()] if out.ndim == 0 else out


def base_measure_dkappa(family: EdmFamily, x, kappa):
    """Partial derivative of h(x, kappa) with respect to kappa."""
    family = EdmFamily(family)
    x = np.asarray(x, dtype=float)
    k = np.asarray(kappa, dtype=float)
    if family is EdmFamily.GAUSSIAN:
        out = x**2 / (2.0 * k**2) - 0.5 / k
    elif family is EdmFamily.GAMMA:
        out = np.log(x) - special.digamma(k)
    elif family is EdmFamily.INVERSE_GAUSSIAN:
        out = -k / x + 1.0 / k
    elif family is EdmFamily.POISSON:
        out = x / k
    elif family is EdmFamily.BINOMIAL:
        out = special.digamma(k + 1.0) - special.digamma(k - x + 1.0)
    else:
        out = special.digamma(x + k) - special.digamma(k)
    return out[()] if out.ndim == 0 else out


def log_density(params: EdmParams, x):
    """Log density (or mass) of ``x`` under ``params``.

    Raises :class:`SupportError` for observations outside the support; the
    parameters themselves were validated when ``params`` was built.
    """
    return log_density_natural(params.family, params.theta, params.kappa, x)


def log_density_natural(family: EdmFamily, theta, kappa, x):
    """:func:`log_density` with array-valued ``theta``/``kappa``."""
    family = EdmFamily(family)
    theta = _check_theta(family, theta)
    kappa = _check_kappa(family, kappa)
    x = _check_support(family, x, kappa)
    out = x * theta - kappa * log_partition(family, theta) + base_measure(family, x, kappa)
    return out[()] if np.ndim(out) == 0 else out


def from_standard(family: EdmFamily, **standard) -> EdmParams:
    """Map textbook parameters to ``(theta, kappa)``.

    Expected keyword names per family:

    ===================  =======================
    gaussian             ``mu``, ``sigma2``
    gamma                ``shape``, ``rate``
    inverse_gaussian     ``mu``, ``lam``
    poisson              ``lam``
    binomial             ``r``, ``p``
    negative_binomial    ``r``, ``p``
    ===================  =======================

    The negative binomial mass is ``C(x + r - 1, x) p**x (1 - p)**r``.
    """
    family = EdmFamily(family)

    def positive(name):
        v = float(standard[name])
        if not np.isfinite(v) or v <= 0:
            raise ParameterDomainError(f"{family.value}: {name} must be positive, got {v}")
        return v

    def probability(name):
        v = float(standard[name])
        if not 0.0 < v < 1.0:
            raise ParameterDomainError(f"{family.value}: {name} must lie in (0, 1), got {v}")
        return v

    try:
        if family is EdmFamily.GAUSSIAN:
            mu = float(standard["mu"])
            s2 = positive("sigma2")
            return EdmParams(family, mu / s2, s2)
        if family is EdmFamily.GAMMA:
            return EdmParams(family, -positive("rate"), positive("shape"))
        if family is EdmFamily.INVERSE_GAUSSIAN:
            mu, lam = positive("mu"), positive("lam")
            return EdmParams(family, -lam / (2.0 * mu**2), np.sqrt(lam))
        if family is EdmFamily.POISSON:
            return EdmParams(family, np.log(positive("lam")), 1.0)
        if family is EdmFamily.BINOMIAL:
            p = probability("p")
            return EdmParams(family, np.log(p) - np.log1p(-p), positive("r"))
        p = probability("p")
        return EdmParams(family, np.log(p), positive("r"))
    except KeyError as exc:
        raise ParameterDomainError(f"{family.value}: missing standard parameter {exc}") from None


def to_standard(params: EdmParams) -> dict:
    """Inverse of :func:`from_standard`.

    Poisson keeps its dispersion: the returned rate is ``kappa * exp(theta)``.
    """
    f, t, k = params.family, params.theta, params.kappa
    if f is EdmFamily.GAUSSIAN:
        return {"mu": t * k, "sigma2": k}
    if f is EdmFamily.GAMMA:
        return {"shape": k, "rate": -t}
    if f is EdmFamily.INVERSE_GAUSSIAN:
        lam = k**2
        return {"mu": np.sqrt(lam / (-2.0 * t)), "lam": lam}
    if f is EdmFamily.POISSON:
        return {"lam": k * np.exp(t)}
    if f is EdmFamily.BINOMIAL:
        return {"r": k, "p": float(special.expit(t))}
    return {"r": k, "p": float(np.exp(t))}


def mean_to_theta(family: EdmFamily, unit_mean):
    """Inverse of ``Psi'``: the natural parameter whose unit-dispersion mean is given."""
    family = EdmFamily(family)
    m = np.asarray(unit_mean, dtype=float)
    if family is EdmFamily.GAUSSIAN:
        out = m.copy()
    else:
        if np.any(m <= 0):
            raise ParameterDomainError(f"{family.value}: mean must be positive, got {m}")
        if family is EdmFamily.GAMMA:
            out = -1.0 / m
        elif family is EdmFamily.INVERSE_GAUSSIAN:
            out = -0.5 / m**2
        elif family is EdmFamily.POISSON:
            out = np.log(m)
        elif family is EdmFamily.BINOMIAL:
            if np.any(m >= 1):
                raise ParameterDomainError(f"binomial: mean per trial must be below 1, got {m}")
            out = special.logit(m)
        else:
            out = np.log(m) - np.log1p(m)
    return out[()] if out.ndim == 0 else out


def edm_sample(params: EdmParams, rng: np.random.Generator, size=None):
    """Draw from ``params`` with an explicit generator."""
    return sample_natural(params.family, params.theta, params.kappa, rng, size=size)


def sample_natural(family: EdmFamily, theta, kappa, rng: np.random.Generator, size=None):
    """Draw with array-valued ``theta``/``kappa`` (broadcast against ``size``).

    Binomial sampling needs an integer number of trials.
    """
    f = EdmFamily(family)
    t = _check_theta(f, theta)
    k = _check_kappa(f, kappa)
    if f is EdmFamily.GAUSSIAN:
        return rng.normal(k * t, np.sqrt(k), size=size)
    if f is EdmFamily.GAMMA:
        return rng.gamma(k, -1.0 / t, size=size)
    if f is EdmFamily.INVERSE_GAUSSIAN:
        return rng.wald(k / np.sqrt(-2.0 * t), k**2, size=size)
    if f is EdmFamily.POISSON:
        return rng.poisson(k * np.exp(t), size=size).astype(float)
    if f is EdmFamily.BINOMIAL:
        if not _is_integer(k):
            raise ParameterDomainError(f"binomial sampling needs integer trials, got {k}")
        return rng.binomial(k.astype(np.int64), special.expit(t), size=size).astype(float)
    return rng.negative_binomial(k, -np.expm1(t), size=size).astype(float)
