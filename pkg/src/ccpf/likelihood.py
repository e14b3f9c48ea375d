"""
Per-count expected log-likelihoods of one observed cell.

A cell is summarised by a fixed-width record so that the local posterior over
the count, the MAP objective for ``(kappa, c)`` and its gradients all work on
the same numbers:

* gaussian: ``[y, E[mean], E[mean**2], E[prec], E[log prec]]``
* poisson:  ``[y, E[rate], 0, 0, 0]``
* edm:      ``[y, theta, 0, 0, 0]``

``phi1`` and ``phi2`` are the linkage values on the candidate counts.  The
Gaussian channel is ``N(phi1 mean, phi2 / prec)``; the Poisson channel scales
the rate by ``phi2``; the EDM channel uses dispersion ``phi2 * kappa``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import special

from .edm import EdmFamily, base_measure, base_measure_dkappa, log_partition

RECORD_WIDTH = 5
_LOG_2PI = math.log(2.0 * math.pi)


def make_record(channel: str, y: float, stats) -> np.ndarray:
    rec = np.zeros(RECORD_WIDTH)
    rec[0] = y
    if channel == "gaussian":
        rec[1:5] = stats
    else:
        rec[1] = stats[0]
    return rec


def _cols(rec):
    rec = np.asarray(rec, dtype=float)
    return [rec[..., k, None] for k in range(RECORD_WIDTH)]


def count_loglik(channel, family, rec, phi1, phi2, kappa, kappa_free):
    """Expected log-likelihood of the record for every candidate count.

    ``rec`` has shape ``(..., 5)`` and the result ``(..., n_counts)``.  When
    ``kappa_free`` the Gaussian precision is ``1/kappa`` instead of the
    recorded moments.
    """
    y, a, b, p, logp = _cols(rec)
    if channel == "gaussian":
        if kappa_free:
            p, logp = 1.0 / kappa, -math.log(kappa)
        quad = y * y - 2.0 * phi1 * y * a + phi1 * phi1 * b
        return -0.5 * p * quad / phi2 - 0.5 * (_LOG_2PI + np.log(phi2)) + 0.5 * logp
    if channel == "poisson":
        return y * np.log(phi2 * a) - phi2 * a - special.gammaln(y + 1.0)
    family = EdmFamily(family)
    disp = phi2 * kappa
    ll = y * a - disp * log_partition(family, a) + base_measure(family, y, disp)
    if family is EdmFamily.BINOMIAL:
        ll = np.where(y <= np.floor(disp), ll, -np.inf)
    return ll


def count_loglik_grads(channel, family, rec, phi1, phi2, dphi2_dc, kappa, kappa_free):
    """Derivatives of :func:`count_loglik` with respect to ``log kappa`` and ``c``.

    ``c`` enters only through ``phi2``.  The recorded variational moments are
    held fixed.
    """
    y, a, b, p, logp = _cols(rec)
    if channel == "gaussian":
        if kappa_free:
            p = 1.0 / kappa
        quad = y * y - 2.0 * phi1 * y * a + phi1 * phi1 * b
        d_phi2 = 0.5 * p * quad / (phi2 * phi2) - 0.5 / phi2
        d_logk = (0.5 * p * quad / phi2 - 0.5) if kappa_free else np.zeros_like(d_phi2)
        return d_logk, d_phi2 * dphi2_dc
    if channel == "poisson":
        d_phi2 = y / phi2 - a
        return np.zeros_like(d_phi2), d_phi2 * dphi2_dc
    disp = phi2 * kappa
    d_disp = -log_partition(EdmFamily(family), a) + base_measure_dkappa(EdmFamily(family), y, disp)
    d_logk = disp * d_disp if kappa_free else np.zeros_like(d_disp)
    return d_logk, kappa * d_disp * dphi2_dc
