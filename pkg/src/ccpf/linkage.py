"""
Linkage functions and zero-truncated Poisson utilities.

A linkage ``phi(n)`` scales the dispersion of the observation model by a
function of the latent interaction count ``n >= 1``:

* ignorable:    ``phi(n) = 1``
* linear:       ``phi(n) = 1 - c + c * (-1)**(n + 1)``
* exponential:  ``phi(n) = 1 - c + c * n``

Given that a cell is observed, ``n`` follows a zero-truncated Poisson (ZTP)
law with the rate ``lam`` of the missingness model.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import special, stats

from .edm import EdmFamily, EdmParams, sample_natural
from .errors import ParameterDomainError, UnsupportedCombinationError

ZTP_TAIL = 1e-14
ZTP_CAP = 10_000


class LinkKind(str, enum.Enum):
    IGNORABLE = "ignorable"
    LINEAR = "linear"
    EXPONENTIAL = "exponential"


# open lower bound, upper bound, upper inclusive
_C_BOUNDS = {
    LinkKind.IGNORABLE: (-math.inf, math.inf, True),
    LinkKind.LINEAR: (-0.5, 0.5, False),
    LinkKind.EXPONENTIAL: (-1.0, 1.0, True),
}


@dataclass(frozen=True)
class Linkage:
    kind: LinkKind = LinkKind.IGNORABLE
    c: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LinkKind(self.kind))
        object.__setattr__(self, "c", float(self.c))
        lo, hi, hi_incl = _C_BOUNDS[self.kind]
        ok = self.c > lo and (self.c <= hi if hi_incl else self.c < hi)
        if not ok:
            raise ParameterDomainError(f"{self.kind.value} linkage needs c in ({lo}, {hi}{']' if hi_incl else ')'}, got {self.c}")

    @property
    def ignorable(self) -> bool:
        return self.kind is LinkKind.IGNORABLE

    def with_c(self, c: float) -> "Linkage":
        return Linkage(self.kind, c)

    def c_interval(self, margin: float = 1e-6) -> tuple[float, float]:
        """Closed interval of admissible ``c`` values kept ``margin`` inside the open bounds."""
        lo, hi, hi_incl = _C_BOUNDS[self.kind]
        return lo + margin, hi - margin

    def __str__(self):
        return self.kind.value if self.ignorable else f"{self.kind.value}({self.c:g})"


IGNORABLE = Linkage()


def _check_counts(n):
    n = np.asarray(n)
    if np.any(n < 1):
        raise ParameterDomainError("linkage functions are only defined for n >= 1")
    return n


def phi(link: Linkage, n):
    """Dispersion multiplier for interaction count(s) ``n >= 1``."""
    n = _check_counts(n)
    if link.kind is LinkKind.IGNORABLE:
        out = np.ones(n.shape)
    elif link.kind is LinkKind.LINEAR:
        out = np.where(n % 2 == 1, 1.0, 1.0 - 2.0 * link.c)
    else:
        out = 1.0 - link.c + link.c * n
    return out[()] if out.ndim == 0 else out


def dphi_dc(link: Linkage, n):
    """Derivative of ``phi(n)`` with respect to ``c``."""
    n = _check_counts(n)
    if link.kind is LinkKind.IGNORABLE:
        out = np.zeros(n.shape)
    elif link.kind is LinkKind.LINEAR:
        out = np.where(n % 2 == 1, 0.0, -2.0)
    else:
        out = n - 1.0
    return out[()] if out.ndim == 0 else out


def _check_rate(lam):
    lam = np.asarray(lam, dtype=float)
    if np.any(~(lam > 0)) or not np.all(np.isfinite(lam)):
        raise ParameterDomainError(f"ZTP rate must be positive and finite, got {lam}")
    return lam


def ztp_log_pmf(lam, n):
    """``log[lam**n / (n! (exp(lam) - 1))]`` for ``n >= 1``."""
    lam = _check_rate(lam)
    n = _check_counts(n)
    out = n * np.log(lam) - special.gammaln(n + 1.0) - np.log(np.expm1(lam))
    return out[()] if np.ndim(out) == 0 else out


def missing_prob(lam):
    """Probability that a cell with rate ``lam`` is missing, ``exp(-lam)``."""
    out = np.exp(-_check_rate(lam))
    return out[()] if out.ndim == 0 else out


def ztp_tail(lam: float, n_max: int) -> float:
    """ZTP probability mass above ``n_max``."""
    lam = float(_check_rate(lam))
    return float(special.pdtrc(n_max, lam) / -math.expm1(-lam))


def ztp_truncation(lam: float, tail: float = ZTP_TAIL, cap: int = ZTP_CAP) -> int:
    """Smallest power-of-two support size whose neglected ZTP tail is below ``tail``."""
    n = 1
    while n < cap and ztp_tail(lam, n) >= tail:
        n *= 2
    return min(n, cap)


def expected_phi(link: Linkage, lam):
    """Closed-form ``E[phi(N)]`` for ``N ~ ZTP(lam)``."""
    return expected_phi_curve(link.kind, link.c, lam)


def expected_phi_curve(kind: LinkKind, c: float, lam):
    """:func:`expected_phi` on a raw ``(kind, c)`` pair.

    No positivity check on ``phi``, so curves for boundary values such as the
    linear ``c = 0.5`` can be drawn.
    """
    kind = LinkKind(kind)
    lam = _check_rate(lam)
    if kind is LinkKind.IGNORABLE:
        out = np.ones(lam.shape)
    elif kind is LinkKind.LINEAR:
        out = 1.0 - c + c * np.exp(-lam)
    else:
        # E[N] = lam / (1 - exp(-lam)), written to stay accurate as lam -> 0
        out = 1.0 - c + c * lam / -np.expm1(-lam)
    return out[()] if out.ndim == 0 else out


class PhiRatios(NamedTuple):
    """Expectations used by the two-channel Gaussian coupling.

    ``ratio = E[phi1/phi2]``, ``sq_ratio = E[phi1**2/phi2]``, ``inv = E[1/phi2]``.
    """

    ratio: float
    sq_ratio: float
    inv: float


UNIT_RATIOS = PhiRatios(1.0, 1.0, 1.0)


def ztp_probs(lam: float, tail: float = ZTP_TAIL, cap: int = ZTP_CAP) -> np.ndarray:
    """ZTP probabilities on ``1..N`` with ``N`` chosen by :func:`ztp_truncation`."""
    n = np.arange(1, ztp_truncation(lam, tail, cap) + 1)
    return np.exp(ztp_log_pmf(lam, n))


def expected_phi_ratios(link_mean: Linkage, link_var: Linkage, lam: float) -> PhiRatios:
    """Ratio statistics under ``ZTP(lam)`` by truncated enumeration."""
    if link_mean.ignorable and link_var.ignorable:
        return UNIT_RATIOS
    p = ztp_probs(lam)
    n = np.arange(1, p.size + 1)
    p1, p2 = phi(link_mean, n), phi(link_var, n)
    return PhiRatios(float(p @ (p1 / p2)), float(p @ (p1**2 / p2)), float(p @ (1.0 / p2)))


def sample_ztp(lam, rng: np.random.Generator, size=None) -> np.ndarray:
    """Zero-truncated Poisson draws.

    The first arrival of a rate-``lam`` process on ``[0, 1]`` is drawn from its
    conditional law given at least one arrival; the remaining arrivals are
    Poisson on the rest of the interval.  Both steps invert a CDF at a uniform
    draw, so for a fixed stream the counts are non-decreasing in ``lam``.
    """
    lam = _check_rate(lam)
    u = rng.random(size)
    v = rng.random(size)
    first = -np.log1p(u * np.expm1(-lam)) / lam
    rest = stats.poisson.ppf(v, lam * (1.0 - first))
    return 1 + np.asarray(rest).astype(np.int64)


def compound_sample(
    link: Linkage,
    base: EdmParams,
    lam: float,
    rng: np.random.Generator,
    size=None,
    counts=None,
):
    """Draw ``(n, y)`` by explicit compounding.

    ``n ~ ZTP(lam)``; for the exponential linkage ``y = Y0 + Y1 + ... + Yn``
    with ``Y0 ~ p(theta, (1 - c) kappa)`` and ``Yk ~ p(theta, c kappa)``.  For
    the linear linkage the terms alternate in sign, which only stays in the
    family for Gaussian bases.  ``c == 0`` and the ignorable linkage draw ``y``
    directly from ``p(theta, kappa)``.

    Counts, ``Y0``, ``Y1`` and the remaining terms come from separate child
    streams of ``rng``, so two calls with equally seeded generators and
    different ``lam`` share ``Y0`` and ``Y1`` exactly.  Passing ``counts``
    replaces the sampled counts (the count stream is still consumed).
    """
    shape = () if size is None else size
    count = int(np.prod(shape))
    count_rng, first_rng, second_rng, extra_rng = rng.spawn(4)
    n = np.asarray(sample_ztp(lam, count_rng, count))
    if counts is not None:
        n = np.broadcast_to(np.asarray(counts, dtype=np.int64), n.shape).copy()
        _check_counts(n)

    if link.ignorable or link.c == 0.0:
        y = sample_natural(base.family, base.theta, base.kappa, first_rng, count)
        return n.reshape(shape), y.reshape(shape)

    c = link.c
    if link.kind is LinkKind.EXPONENTIAL:
        if not 0.0 < c <= 1.0:
            raise UnsupportedCombinationError(f"compounding needs 0 < c <= 1, got {c}")
    else:
        if base.family is not EdmFamily.GAUSSIAN:
            raise UnsupportedCombinationError(
                f"the alternating linear compound is only closed for Gaussian bases, not {base.family.value}"
            )
        if not 0.0 < c < 0.5:
            raise UnsupportedCombinationError(f"linear compounding needs 0 < c < 0.5, got {c}")

    if c < 1.0:
        y = sample_natural(base.family, base.theta, (1.0 - c) * base.kappa, first_rng, count)
    else:
        y = np.zeros(count)
    y = y + sample_natural(base.family, base.theta, c * base.kappa, second_rng, count)

    extra = n - 1
    total = int(extra.sum())
    if total:
        draws = sample_natural(base.family, base.theta, c * base.kappa, extra_rng, total)
        owner = np.repeat(np.arange(count), extra)
        if link.kind is LinkKind.LINEAR:
            # term index within its owner: 2, 3, ... ; odd terms add, even subtract
            offsets = np.arange(total) - np.repeat(np.cumsum(extra) - extra, extra)
            draws = np.where((offsets + 2) % 2 == 1, draws, -draws)
        y = y + np.bincount(owner, weights=draws, minlength=count)
    return n.reshape(shape), y.reshape(shape)


def direct_sample(link: Linkage, base: EdmParams, n, rng: np.random.Generator):
    """``y ~ p(theta, phi(n) kappa)`` for given counts ``n``."""
    n = np.asarray(n)
    return sample_natural(base.family, base.theta, phi(link, n) * base.kappa, rng, n.shape)
