import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import special

from ccpf.datamodels import (
    GMM,
    PMF,
    PMM,
    GaussianElement,
    HierLinReg,
    HPFData,
    build_model,
    expected_log_partition,
    restore_model,
    update_gaussian_element,
    update_gmm,
    update_hpf_data,
    update_linreg,
    update_pmf,
    update_pmm,
)
from ccpf.errors import SupportError
from ccpf.missingness import UNIT_STATS, PhiStats

RNG = np.random.default_rng


def stats_with(ratio=1.0, sq_ratio=1.0, inv=1.0, mean=1.0):
    return PhiStats(mean, ratio, sq_ratio, inv)


# ---------------------------------------------------------------------------
# expected log-partition statistics


def test_expected_log_partition_examples():
    pmm = PMM(1, 1, 2.0, 1.0, RNG(0))
    pmm.shape[:] = 2.0
    pmm.rate[:] = 1.0
    assert expected_log_partition(pmm, 0, 0) == pytest.approx(2.0)

    ge = GaussianElement(prior_mean=0.0)
    ge.params[1] = 0.0
    assert expected_log_partition(ge, 0, 0).mean == 0.0

    hpf = HPFData(1, 1, 2, 1.0, 1.0, 1.0, 1.0, RNG(0))
    for name in ("row_shape", "row_rate", "col_shape", "col_rate"):
        getattr(hpf, name)[:] = 1.0
    assert expected_log_partition(hpf, 0, 0) == pytest.approx(2.0)


# ---------------------------------------------------------------------------
# mixture models


def test_gmm_single_component_update():
    eta, rho, s2, C, y = 0.3, 2.0, 1.5, 7.0, 1.2
    m = GMM(1, 1, eta, rho, s2, RNG(0))
    update_gmm(m, 0, 0, y, UNIT_STATS, 1.0, scale=C)
    assert m.loc_mean[0, 0] == pytest.approx((eta * s2 + rho * C * y) / (s2 + rho * C), rel=1e-14)
    assert m.loc_var[0, 0] == pytest.approx(rho * s2 / (s2 + rho * C), rel=1e-14)


def test_gmm_variance_uses_ratio():
    rho, s2, C, r = 2.0, 1.5, 5.0, 0.8
    m = GMM(1, 2, 0.0, rho, s2, RNG(1))
    update_gmm(m, 0, 0, 0.4, stats_with(ratio=r, sq_ratio=0.7), 1.0, scale=C)
    assert m.loc_var[0] == pytest.approx(rho * s2 / (s2 + rho * C * r))


def test_gmm_zero_step_leaves_state():
    m = GMM(2, 2, 0.1, 1.0, 1.0, RNG(2))
    before = (m.loc_mean.copy(), m.loc_var.copy())
    update_gmm(m, 1, 0, 3.0, UNIT_STATS, 0.0, scale=4.0)
    assert np.array_equal(m.loc_mean, before[0]) and np.array_equal(m.loc_var, before[1])


def test_pmm_updates():
    eta, rho, C, y = 0.4, 1.3, 6.0, 3.0
    m = PMM(1, 1, eta, rho, RNG(0))
    update_pmm(m, 0, 0, y, UNIT_STATS, 1.0, scale=C)
    assert m.shape[0, 0] == pytest.approx(eta + C * y)
    assert m.rate[0, 0] == pytest.approx(rho + C)
    sym = PMM(1, 3, eta, rho, RNG(0))
    sym.shape[:] = 0.9
    sym.rate[:] = 1.1
    assert sym.responsibilities(0) == pytest.approx(np.full(3, 1 / 3))
    with pytest.raises(SupportError):
        update_pmm(m, 0, 0, -1.0, UNIT_STATS, 1.0, scale=1.0)
    with pytest.raises(SupportError):
        update_pmm(m, 0, 0, 1.5, UNIT_STATS, 1.0, scale=1.0)


# ---------------------------------------------------------------------------
# matrix factorization and regression


def test_pmf_reduces_to_gmm_with_frozen_unit_columns():
    eta, rho, s2, C, y = 0.2, 1.5, 0.8, 9.0, -0.7
    pmf = PMF(1, 1, 1, eta, rho, 1.0, 1.0, s2, RNG(0))
    pmf.col_mean[:] = 1.0
    pmf.col_var[:] = 0.0
    pmf.update_row(0, 0, y, UNIT_STATS, C, 1.0)
    assert pmf.row_mean[0, 0] == pytest.approx((eta * s2 + rho * C * y) / (s2 + rho * C), rel=1e-14)
    gmm = GMM(1, 1, eta, rho, s2, RNG(0))
    update_gmm(gmm, 0, 0, y, UNIT_STATS, 1.0, scale=C)
    assert pmf.row_mean[0, 0] == pytest.approx(gmm.loc_mean[0, 0], rel=1e-14)
    assert pmf.row_var[0, 0] == pytest.approx(gmm.loc_var[0, 0], rel=1e-14)


def test_pmf_row_variance_formula():
    rho, s2, C, r = 1.5, 0.8, 4.0, 0.6
    pmf = PMF(1, 1, 2, 0.0, rho, 0.5, 0.3, s2, RNG(1))
    av, bv = pmf.col_mean[0].copy(), pmf.col_var[0].copy()
    pmf.update_row(0, 0, 1.0, stats_with(ratio=r), C, 1.0)
    assert pmf.row_var[0] == pytest.approx(rho * s2 / (s2 + rho * C * r * (bv + av**2)))


def test_pmf_row_and_column_updates_mirror():
    pmf = PMF(2, 2, 2, 0.3, 0.9, 0.3, 0.9, 1.1, RNG(4))
    pmf.set_counts(np.array([0]), np.array([1]), 2, 2)
    pmf.col_mean[:] = pmf.row_mean[::-1]
    pmf.col_var[:] = pmf.row_var[::-1]
    t = pmf.copy()
    # (row u, col i) and the transposed model with rows and columns swapped
    pmf.update_row(0, 1, 0.8, UNIT_STATS, 3.0, 1.0)
    t.row_mean, t.col_mean = t.col_mean.copy(), t.row_mean.copy()
    t.row_var, t.col_var = t.col_var.copy(), t.row_var.copy()
    t.update_col(0, 1, 0.8, UNIT_STATS, 3.0, 1.0)
    assert np.allclose(pmf.row_mean[0], t.col_mean[0], rtol=0, atol=1e-15)
    assert np.allclose(pmf.row_var[0], t.col_var[0], rtol=0, atol=1e-15)


def test_update_pmf_applies_both_sides():
    pmf = PMF(2, 3, 2, 0.3, 0.9, 0.3, 0.9, 1.1, RNG(5))
    pmf.set_counts(np.array([0, 1]), np.array([2, 2]), 2, 3)
    before = pmf.copy()
    update_pmf(pmf, 1, 2, 0.5, UNIT_STATS, 1.0)
    assert not np.array_equal(pmf.row_mean[1], before.row_mean[1])
    assert not np.array_equal(pmf.col_mean[2], before.col_mean[2])
    assert np.array_equal(pmf.row_mean[0], before.row_mean[0])


def test_hpf_data_updates():
    m = HPFData(1, 1, 1, 0.3, 1.0, 0.3, 1.0, RNG(0))
    update_hpf_data(m, 0, 0, 0.0, UNIT_STATS, 1.0, row_scale=5.0, col_scale=5.0)
    assert m.row_shape[0, 0] == pytest.approx(0.3)
    m = HPFData(1, 1, 2, 0.3, 1.0, 0.3, 1.0, RNG(0))
    alloc = m.allocations(np.array([0]), np.array([0]))[0]
    m.update_row(0, 0, 4.0, UNIT_STATS, 5.0, 1.0)
    assert m.row_shape[0] == pytest.approx(0.3 + 5.0 * 4.0 * alloc)
    one = HPFData(1, 1, 1, 0.3, 1.0, 0.3, 1.0, RNG(0))
    assert one.allocations(np.array([0]), np.array([0]))[0] == pytest.approx([1.0])
    with pytest.raises(SupportError):
        update_hpf_data(one, 0, 0, -2.0, UNIT_STATS, 1.0, row_scale=1.0, col_scale=1.0)


def test_linreg_zero_covariates_collapse_to_prior():
    m = HierLinReg(1, np.zeros((1, 2)), [0.4, -0.2], 0.7, 1.3, RNG(0))
    update_linreg(m, 0, 0, 2.5, np.zeros(2), stats_with(ratio=0.9, sq_ratio=0.8), 1.0, scale=10.0)
    assert m.coef_mean[0] == pytest.approx([0.4, -0.2])
    assert m.coef_var[0] == pytest.approx([0.7, 0.7])


def test_linreg_unit_covariate_matches_gmm():
    eta, rho, s2, C, y = 0.3, 2.0, 1.5, 7.0, 1.2
    reg = HierLinReg(1, np.ones((1, 1)), eta, rho, s2, RNG(0))
    gmm = GMM(1, 1, eta, rho, s2, RNG(0))
    gmm.loc_mean[:] = reg.coef_mean
    r = stats_with(ratio=0.8, sq_ratio=0.6)
    update_linreg(reg, 0, 0, y, np.ones(1), r, 1.0, scale=C)
    update_gmm(gmm, 0, 0, y, r, 1.0, scale=C)
    assert reg.coef_mean[0, 0] == gmm.loc_mean[0, 0]
    assert reg.coef_var[0, 0] == gmm.loc_var[0, 0]


def test_linreg_unit_covariates_match_gmm_with_several_components():
    rng = RNG(3)
    K, y, C = 3, np.array([0.5, -1.0, 2.0]), 4.0
    reg = HierLinReg(1, np.ones((3, K)), 0.2, 0.5, 1.1, rng)
    gmm = GMM(1, K, 0.2, 0.5, 1.1, rng)
    gmm.loc_mean[:] = reg.coef_mean
    reg.update_row(0, np.arange(3), y, UNIT_STATS, C, 1.0)
    gmm.update_group(0, y, UNIT_STATS, C, 1.0)
    assert np.allclose(reg.coef_mean, gmm.loc_mean, rtol=1e-13, atol=0)
    assert np.allclose(reg.coef_var, gmm.loc_var, rtol=1e-13, atol=0)


def test_linreg_variance_formula_and_length_check():
    rho, s2, C, r, x = 0.5, 1.2, 3.0, 0.7, np.array([1.5, -0.4])
    reg = HierLinReg(2, np.zeros((2, 2)), 0.0, rho, s2, RNG(0))
    update_linreg(reg, 0, 1, 0.3, x, stats_with(ratio=r), 1.0, scale=C)
    assert reg.coef_var[0] == pytest.approx(rho * s2 / (s2 + rho * C * r * x**2))
    with pytest.raises(ValueError):
        update_linreg(reg, 0, 1, 0.3, np.ones(3), UNIT_STATS, 1.0, scale=C)


# ---------------------------------------------------------------------------
# Normal-Gamma element


def test_gaussian_element_shape_target():
    m = GaussianElement(prior_mean=0.0, prior_strength=1.0, prec_shape=2.0, prec_rate=1.0)
    CI, CU = 30, 40
    update_gaussian_element(m, 0.5, UNIT_STATS, 1.0, scale=CI * CU)
    assert m.a_hat == pytest.approx(2.0 + (1 + CI * CU) / 2)


def test_gaussian_element_mean_limits():
    strong = GaussianElement(prior_mean=2.0, prior_strength=1e12)
    update_gaussian_element(strong, -5.0, UNIT_STATS, 1.0, scale=1.0)
    assert strong.mu_hat == pytest.approx(2.0, abs=1e-9)
    flat = GaussianElement(prior_mean=2.0, prior_strength=0.0)
    update_gaussian_element(flat, -5.0, UNIT_STATS, 1.0, scale=17.0)
    assert flat.mu_hat == pytest.approx(-5.0, rel=1e-14)


# ---------------------------------------------------------------------------
# coupling neutrality against textbook homoscedastic updates


def textbook_gmm(loc_mean, loc_var, y, eta, rho, s2, C):
    # homoscedastic additive-components Gaussian, coordinate-wise blend with lr = 1
    m, v = loc_mean.copy(), loc_var.copy()
    for k in range(m.size):
        others = m.sum() - m[k]
        den = s2 + rho * C * y.size
        m[k] = (eta * s2 + rho * C * y.sum() - rho * C * y.size * others) / den
        v[k] = rho * s2 / den
    return m, v


def textbook_normal_gamma(y, mu0, lam, a0, b0, C, mu_hat, var_hat, a_hat, b_hat):
    n = C * y.size
    mu = (mu0 * lam + C * y.sum()) / (lam + n)
    var = b_hat / (a_hat * (lam + n))
    a = a0 + (1 + n) / 2
    b = b0 + 0.5 * C * (y * y).sum() + 0.5 * mu0 * mu0 * lam - mu * (C * y.sum() + mu0 * lam) + 0.5 * (mu * mu + var) * (n + lam)
    return mu, var, a, b


def test_gmm_neutral_coupling_matches_textbook():
    rng = RNG(7)
    y = rng.normal(size=4)
    m = GMM(1, 3, 0.1, 0.6, 1.3, rng)
    ref = textbook_gmm(m.loc_mean[0], m.loc_var[0], y, 0.1, 0.6, 1.3, 2.5)
    update_gmm(m, 0, 0, y, UNIT_STATS, 1.0, scale=2.5)
    assert np.allclose(m.loc_mean[0], ref[0], rtol=1e-14, atol=0)
    assert np.allclose(m.loc_var[0], ref[1], rtol=1e-14, atol=0)


def test_gaussian_element_neutral_coupling_matches_textbook():
    y = np.array([0.3, 1.7, -0.4])
    m = GaussianElement(prior_mean=0.5, prior_strength=2.0, prec_shape=1.5, prec_rate=0.8)
    ref = textbook_normal_gamma(y, 0.5, 2.0, 1.5, 0.8, 3.0, *m.params)
    update_gaussian_element(m, y, UNIT_STATS, 1.0, scale=3.0)
    assert m.params == pytest.approx(ref, rel=1e-14)


@pytest.mark.parametrize("kind", ["gaussian_element", "gmm", "pmf", "hier_linreg"])
def test_unit_stats_and_explicit_unit_ratios_are_bit_identical(kind):
    rng = RNG(9)
    rows = np.array([0, 0, 1, 2])
    cols = np.array([0, 1, 1, 2])
    y = rng.normal(size=4)
    x = rng.normal(size=(3, 2))
    a = build_model(kind, rows, cols, y, 3, 3, 2, RNG(1), covariates=x)
    b = a.copy()
    a.sweep(rows, cols, y, UNIT_STATS)
    b.sweep(rows, cols, y, np.ones((4, 3)))
    for k, v in a.arrays().items():
        assert np.array_equal(v, b.arrays()[k])


# ---------------------------------------------------------------------------
# positivity and serialisation


def random_phi_stats(rng):
    # expectations under a random posterior over five counts with positive linkage values
    q = rng.dirichlet(np.ones(5))
    p1, p2 = rng.uniform(0.2, 3.0, 5), rng.uniform(0.2, 3.0, 5)
    return PhiStats(q @ p2, q @ (p1 / p2), q @ (p1 * p1 / p2), q @ (1 / p2))


KINDS = ["gaussian_element", "gmm", "pmm", "pmf", "hpf_data", "hier_linreg"]


@settings(max_examples=30, deadline=None)
@given(kind=st.sampled_from(KINDS), seed=st.integers(0, 10**6), steps=st.integers(1, 40))
def test_updates_keep_variances_positive(kind, seed, steps):
    rng = RNG(seed)
    rows = np.repeat(np.arange(3), 3)
    cols = np.tile(np.arange(3), 3)
    if kind in ("pmm", "hpf_data"):
        y = rng.poisson(2.0, 9).astype(float)
    else:
        y = rng.normal(size=9)
    m = build_model(kind, rows, cols, y, 3, 3, 2, rng, covariates=rng.normal(size=(3, 2)))
    for _ in range(steps):
        e = int(rng.integers(9))
        s = random_phi_stats(rng)
        m.svi_step(int(rows[e]), int(cols[e]), float(y[e]), s, 0.7)
    arrs = m.arrays()
    for name in ("loc_var", "row_var", "col_var", "coef_var", "shape", "rate", "row_shape", "row_rate", "col_shape", "col_rate"):
        if name in arrs:
            assert np.all(arrs[name] > 0), name
    if kind == "gaussian_element":
        assert np.all(m.params[1:] > 0)


@pytest.mark.parametrize("kind", KINDS)
def test_restore_round_trip(kind):
    rng = RNG(0)
    rows, cols = np.array([0, 1]), np.array([1, 0])
    y = np.array([1.0, 3.0])
    m = build_model(kind, rows, cols, y, 2, 2, 2, rng, covariates=np.eye(2))
    m.sweep(rows, cols, y, UNIT_STATS)
    r = restore_model(m.meta(), m.arrays())
    assert r.meta() == m.meta()
    for k, v in m.arrays().items():
        assert np.array_equal(v, r.arrays()[k])


def test_edm_element_point_estimate():
    rows, cols = np.zeros(50, int), np.arange(50)
    y = RNG(0).gamma(2.0, 1.5, 50)
    m = build_model("gaussian_element", rows, cols, y, 1, 50, 1, RNG(0), family="gamma")
    for _ in range(3):
        m.sweep(rows, cols, y, UNIT_STATS)
    assert m.residual(rows, cols, y, UNIT_STATS) < 1e-12
    m.kappa = 4.0
    assert m.kappa * -1.0 / m.theta == pytest.approx(y.mean())


def test_digamma_responsibilities():
    m = PMM(1, 2, 1.0, 1.0, RNG(0))
    m.shape[0] = [2.0, 1.0]
    m.rate[0] = [1.0, 1.0]
    r = m.responsibilities(0)
    assert r[0] / r[1] == pytest.approx(math.exp(special.digamma(2) - special.digamma(1)))
