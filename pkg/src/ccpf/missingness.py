"""
Hierarchical Poisson factorization of the missing-data pattern.

Cell ``(i, j)`` is observed when its latent count ``n_ij ~ Po(lam_ij)`` is
positive, with ``lam_ij = sum_k u_ik v_jk``.  Row activities ``r_i`` and column
popularities ``w_j`` are the rates of the gamma priors on the factors.  All
latents have gamma variational factors parameterised by (shape, rate).
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, fields
from typing import NamedTuple

import numpy as np
from scipy import special

from .edm import EdmFamily, base_measure
from .errors import DegenerateLikelihoodError, ParameterDomainError
from .linkage import IGNORABLE, Linkage, phi

DEFAULT_N_TR = 20


class GammaVariational(NamedTuple):
    shape: np.ndarray | float
    rate: np.ndarray | float

    @property
    def mean(self):
        return self.shape / self.rate

    @property
    def mean_log(self):
        return special.digamma(self.shape) - np.log(self.rate)


@dataclass(frozen=True)
class HpfHyper:
    """Gamma prior hyperparameters.

    ``r_i ~ Ga(act_shape, act_rate)``, ``u_ik ~ Ga(row_shape, r_i)``,
    ``w_j ~ Ga(pop_shape, pop_rate)``, ``v_jk ~ Ga(col_shape, w_j)``.
    """

    act_shape: float = 0.01
    act_rate: float = 0.1
    pop_shape: float = 0.01
    pop_rate: float = 0.1
    row_shape: float = 0.1
    col_shape: float = 0.1
    K: int = 10

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (np.isfinite(v) and v > 0):
                raise ParameterDomainError(f"{f.name} must be positive, got {v}")
        if int(self.K) != self.K:
            raise ParameterDomainError(f"K must be an integer, got {self.K}")


def hyper_init(sparsity: float, K: int, act_shape=0.01, act_rate=0.1, pop_shape=0.01, pop_rate=0.1) -> HpfHyper:
    """Heavy-tailed hyperparameters scaled to the observed density.

    ``sparsity`` is the fraction of missing cells.  Inverting
    ``P(missing) = exp(-lam)`` at the matrix level gives the expected count
    ``-log(sparsity)``; the factor shapes are chosen so the prior mean of
    ``lam`` matches it.
    """
    if not 0.0 < sparsity < 1.0:
        raise ParameterDomainError(f"sparsity must lie in (0, 1), got {sparsity}")
    if K < 1:
        raise ParameterDomainError(f"K must be positive, got {K}")
    expected_n = -math.log(sparsity)
    scale = math.sqrt(expected_n / K)
    return HpfHyper(
        act_shape=act_shape,
        act_rate=act_rate,
        pop_shape=pop_shape,
        pop_rate=pop_rate,
        row_shape=act_shape * scale / act_rate,
        col_shape=pop_shape * scale / pop_rate,
        K=int(K),
    )


@dataclass
class HpfState:
    act_shape: np.ndarray
    act_rate: np.ndarray
    pop_shape: np.ndarray
    pop_rate: np.ndarray
    row_shape: np.ndarray
    row_rate: np.ndarray
    col_shape: np.ndarray
    col_rate: np.ndarray
    t_row: np.ndarray = field(default=None)
    t_col: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.t_row is None:
            self.t_row = np.ones(self.n_rows, dtype=np.int64)
        if self.t_col is None:
            self.t_col = np.ones(self.n_cols, dtype=np.int64)

    @property
    def n_rows(self) -> int:
        return self.row_shape.shape[0]

    @property
    def n_cols(self) -> int:
        return self.col_shape.shape[0]

    @property
    def K(self) -> int:
        return self.row_shape.shape[1]

    def activity(self) -> GammaVariational:
        return GammaVariational(self.act_shape, self.act_rate)

    def popularity(self) -> GammaVariational:
        return GammaVariational(self.pop_shape, self.pop_rate)

    def row_factors(self) -> GammaVariational:
        return GammaVariational(self.row_shape, self.row_rate)

    def col_factors(self) -> GammaVariational:
        return GammaVariational(self.col_shape, self.col_rate)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self) -> "HpfState":
        return HpfState(**{k: v.copy() for k, v in self.arrays().items()})

    def rate_matrix(self) -> np.ndarray:
        """Dense ``lam``; only for small grids."""
        return (self.row_shape / self.row_rate) @ (self.col_shape / self.col_rate).T


def init_state(hyper: HpfHyper, n_rows: int, n_cols: int, rng: np.random.Generator, t0: int = 1) -> HpfState:
    """Prior-centred state with up to 5% multiplicative jitter."""
    K = hyper.K

    def jitter(shape):
        return 1.0 + 0.05 * rng.uniform(-1.0, 1.0, size=shape)

    act_shape = np.full(n_rows, hyper.act_shape + K * hyper.row_shape)
    pop_shape = np.full(n_cols, hyper.pop_shape + K * hyper.col_shape)
    mean_act = hyper.act_shape / hyper.act_rate
    mean_pop = hyper.pop_shape / hyper.pop_rate
    return HpfState(
        act_shape=act_shape * jitter(n_rows),
        act_rate=act_shape / mean_act * jitter(n_rows),
        pop_shape=pop_shape * jitter(n_cols),
        pop_rate=pop_shape / mean_pop * jitter(n_cols),
        row_shape=hyper.row_shape * jitter((n_rows, K)),
        row_rate=mean_act * jitter((n_rows, K)),
        col_shape=hyper.col_shape * jitter((n_cols, K)),
        col_rate=mean_pop * jitter((n_cols, K)),
        t_row=np.full(n_rows, t0, dtype=np.int64),
        t_col=np.full(n_cols, t0, dtype=np.int64),
    )


def _check_index(state: HpfState, i, j):
    if not (0 <= i < state.n_rows and 0 <= j < state.n_cols):
        raise IndexError(f"cell ({i}, {j}) outside a {state.n_rows}x{state.n_cols} grid")


def expected_rate(state: HpfState, i: int, j: int) -> float:
    """``lam_ij = sum_k E[u_ik] E[v_jk]``."""
    _check_index(state, i, j)
    return float(
        (state.row_shape[i] / state.row_rate[i]) @ (state.col_shape[j] / state.col_rate[j])
    )


def expected_rates(state: HpfState, rows, cols) -> np.ndarray:
    """Vectorised :func:`expected_rate` over paired index arrays."""
    rows, cols = np.asarray(rows), np.asarray(cols)
    eu = state.row_shape[rows] / state.row_rate[rows]
    ev = state.col_shape[cols] / state.col_rate[cols]
    return np.einsum("ck,ck->c", eu, ev)


def multinomial_weights(state: HpfState, i: int, j: int) -> np.ndarray:
    """Allocation of the count of cell ``(i, j)`` over the K components."""
    _check_index(state, i, j)
    score = (
        special.digamma(state.row_shape[i])
        - np.log(state.row_rate[i])
        + special.digamma(state.col_shape[j])
        - np.log(state.col_rate[j])
    )
    return softmax(score)


def softmax(score: np.ndarray, axis=-1) -> np.ndarray:
    score = score - score.max(axis=axis, keepdims=True)
    w = np.exp(score)
    return w / w.sum(axis=axis, keepdims=True)


class PhiStats(NamedTuple):
    """Expectations of the linkage under the local posterior of ``n``.

    ``mean = E[phi2]``, ``ratio = E[phi1/phi2]``, ``sq_ratio = E[phi1**2/phi2]``
    and ``inv = E[1/phi2]``, where ``phi1`` scales the mean and ``phi2`` the
    dispersion.  Single-channel models use ``mean`` only.
    """

    mean: float
    ratio: float
    sq_ratio: float
    inv: float


UNIT_STATS = PhiStats(1.0, 1.0, 1.0, 1.0)


@dataclass
class LocalQn:
    """Categorical posterior over ``n`` in ``1..len(log_weights)``."""

    log_weights: np.ndarray
    expected_n: float
    phi_stats: PhiStats

    @classmethod
    def missing(cls) -> "LocalQn":
        """The point mass at zero used for unobserved cells."""
        return cls(np.empty(0), 0.0, UNIT_STATS)

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_weights)

    @property
    def support(self) -> np.ndarray:
        return np.arange(1, self.log_weights.size + 1)


@functools.lru_cache(maxsize=32)
def _count_grid(n_tr: int):
    n = np.arange(1, n_tr + 1)
    return n, special.gammaln(n + 1.0)


def local_q_from_loglik(
    loglik: np.ndarray,
    lam: float,
    link_mean: Linkage = IGNORABLE,
    link_var: Linkage = IGNORABLE,
) -> LocalQn:
    """Normalise ``exp(loglik[n-1]) * lam**n / n!`` over ``n = 1..len(loglik)``.

    ``loglik`` holds the expected data log-likelihood for each candidate count
    (terms that do not depend on ``n`` may be dropped).
    """
    n_tr = len(loglik)
    if n_tr < 1:
        raise ParameterDomainError("the count support needs at least one value")
    if not lam > 0:
        raise ParameterDomainError(f"rate must be positive, got {lam}")
    n, log_fact = _count_grid(n_tr)
    logw = loglik + n * math.log(lam) - log_fact
    top = logw.max()
    if not np.isfinite(top):
        raise DegenerateLikelihoodError("no interaction count gives the observation positive likelihood")
    logw = logw - (top + math.log(np.exp(logw - top).sum()))
    p = np.exp(logw)
    expected_n = float(p @ n)
    if link_mean.ignorable and link_var.ignorable:
        stats = UNIT_STATS
    else:
        p1, p2 = phi(link_mean, n), phi(link_var, n)
        stats = PhiStats(float(p @ p2), float(p @ (p1 / p2)), float(p @ (p1 * p1 / p2)), float(p @ (1.0 / p2)))
    return LocalQn(logw, expected_n, stats)


def edm_count_loglik(y, expected_log_partition, kappa, link: Linkage, n_tr: int, family: EdmFamily):
    """``-kappa phi(n) E[Psi] + h(y, phi(n) kappa)`` for ``n = 1..n_tr``."""
    family = EdmFamily(family)
    n, _ = _count_grid(n_tr)
    disp = phi(link, n) * kappa
    ll = -disp * expected_log_partition + base_measure(family, y, disp)
    if family is EdmFamily.BINOMIAL:
        ll = np.where(y <= np.floor(disp), ll, -np.inf)
    return ll


def local_q_n(
    y: float,
    lam: float,
    expected_log_partition: float,
    kappa: float,
    link: Linkage,
    n_tr: int = DEFAULT_N_TR,
    family: EdmFamily = EdmFamily.POISSON,
) -> LocalQn:
    """Posterior over the count of an observed cell with a single-channel EDM output.

    ``q(n) ∝ exp{-kappa phi(n) E[Psi(theta)] + h(y, phi(n) kappa)} lam**n / n!``
    """
    ll = edm_count_loglik(y, expected_log_partition, kappa, link, n_tr, family)
    return local_q_from_loglik(ll, lam, link, link)


def global_update(
    state: HpfState,
    hyper: HpfHyper,
    i: int,
    j: int,
    q_n: LocalQn,
    weights: np.ndarray,
    xi: float,
    row_scale: float | None = None,
    col_scale: float | None = None,
) -> HpfState:
    """One stochastic natural-gradient step from cell ``(i, j)``, in place.

    Row-side targets estimate sums over columns, so they are scaled by the
    number of columns (``row_scale``); column-side targets by the number of
    rows.  The step sizes are ``t**-xi`` from the per-row and per-column
    counters, which are incremented afterwards.
    """
    _check_index(state, i, j)
    if row_scale is None:
        row_scale = state.n_cols
    if col_scale is None:
        col_scale = state.n_rows
    K = state.K
    ti = state.t_row[i] ** -xi
    tj = state.t_col[j] ** -xi
    count = q_n.expected_n * weights

    state.act_shape[i] += ti * (hyper.act_shape + K * hyper.row_shape - state.act_shape[i])
    state.pop_shape[j] += tj * (hyper.pop_shape + K * hyper.col_shape - state.pop_shape[j])
    state.row_shape[i] += ti * (hyper.row_shape + row_scale * count - state.row_shape[i])
    state.col_shape[j] += tj * (hyper.col_shape + col_scale * count - state.col_shape[j])
    eu = state.row_shape[i] / state.row_rate[i]
    ev = state.col_shape[j] / state.col_rate[j]
    state.act_rate[i] += ti * (hyper.act_rate + eu.sum() - state.act_rate[i])
    state.pop_rate[j] += tj * (hyper.pop_rate + ev.sum() - state.pop_rate[j])
    state.row_rate[i] += ti * (state.act_shape[i] / state.act_rate[i] + row_scale * ev - state.row_rate[i])
    eu = state.row_shape[i] / state.row_rate[i]
    state.col_rate[j] += tj * (state.pop_shape[j] / state.pop_rate[j] + col_scale * eu - state.col_rate[j])

    state.t_row[i] += 1
    state.t_col[j] += 1
    return state


def batch_targets(state: HpfState, hyper: HpfHyper, expected_n: np.ndarray, weights: np.ndarray) -> dict:
    """Coordinate-ascent targets with exact sums over a dense grid.

    ``expected_n`` is ``(C_I, C_J)``; ``weights`` is ``(C_I, C_J, K)``.  Each
    target uses the current values of the other blocks.
    """
    K = state.K
    count = expected_n[:, :, None] * weights
    eu = state.row_shape / state.row_rate
    ev = state.col_shape / state.col_rate
    return {
        "act_shape": np.full(state.n_rows, hyper.act_shape + K * hyper.row_shape),
        "pop_shape": np.full(state.n_cols, hyper.pop_shape + K * hyper.col_shape),
        "row_shape": hyper.row_shape + count.sum(axis=1),
        "col_shape": hyper.col_shape + count.sum(axis=0),
        "act_rate": hyper.act_rate + eu.sum(axis=1),
        "pop_rate": hyper.pop_rate + ev.sum(axis=1),
        "row_rate": (state.act_shape / state.act_rate)[:, None] + ev.sum(axis=0)[None, :],
        "col_rate": (state.pop_shape / state.pop_rate)[:, None] + eu.sum(axis=0)[None, :],
    }


def batch_update(state: HpfState, hyper: HpfHyper, expected_n: np.ndarray, weights: np.ndarray, tau: float = 1.0) -> HpfState:
    """Blend every block towards its :func:`batch_targets` value, block by block."""
    order = ("act_shape", "pop_shape", "row_shape", "col_shape", "act_rate", "pop_rate", "row_rate", "col_rate")
    for name in order:
        target = batch_targets(state, hyper, expected_n, weights)[name]
        current = getattr(state, name)
        current += tau * (target - current)
    return state
