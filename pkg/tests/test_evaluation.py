import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ccpf import evaluation as ev
from ccpf.datamodels import GaussianElement
from ccpf.edm import EdmFamily
from ccpf.errors import DataError, UndefinedMetricError
from ccpf.linkage import IGNORABLE, LinkKind, Linkage, ztp_log_pmf, ztp_tail
from ccpf.missingness import hyper_init, init_state

EXP = Linkage(LinkKind.EXPONENTIAL, 0.3)


def gaussian_model(mean=0.5, var=2.0):
    dm = GaussianElement()
    dm.params[:] = [mean, 0.1, 3.0, 3.0 * var]
    return dm


def missingness_state(R=6, C=5, seed=0):
    return init_state(hyper_init(0.8, 3), R, C, np.random.default_rng(seed))


def test_ignorable_single_entry_is_base_density():
    dm = gaussian_model(0.5, 2.0)
    ll = ev.test_log_likelihood(None, dm, IGNORABLE, None, 20, ([0], [0], [1.7]))
    assert ll.n_entries == 1
    assert ll.total == pytest.approx(stats.norm.logpdf(1.7, 0.5, math.sqrt(2.0)), abs=1e-12)
    assert ll.per_entry == ll.total


def test_single_count_ignores_the_link():
    dm = gaussian_model(0.2, 1.5)
    base = stats.norm.logpdf(0.9, 0.2, math.sqrt(1.5))
    for link in (EXP, Linkage(LinkKind.LINEAR, 0.4), IGNORABLE):
        ld = ev.predictive_log_density(dm, 0, 0, 0.9, link, lam=0.7, n_tr=1)
        assert ld == pytest.approx(base, abs=1e-12)
    raw = ev.predictive_log_density(dm, 0, 0, 0.9, EXP, lam=0.7, n_tr=1, normalize=False)
    assert raw == pytest.approx(base + ztp_log_pmf(0.7, 1), abs=1e-12)


def test_mixture_matches_explicit_sum():
    dm = gaussian_model(0.4, 1.2)
    y, lam, n_tr = 1.1, 0.9, 6
    n = np.arange(1, n_tr + 1)
    phi = 1 - EXP.c + EXP.c * n
    w = np.exp(ztp_log_pmf(lam, n))
    dens = stats.norm.pdf(y, 0.4, np.sqrt(phi * 1.2))
    expected = math.log(np.sum(w * dens) / np.sum(w))
    assert ev.predictive_log_density(dm, 0, 0, y, EXP, lam, n_tr=n_tr) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(y=st.floats(-5, 5), lam=st.floats(0.01, 5))
def test_unnormalized_mixture_grows_with_truncation(y, lam):
    dm = gaussian_model(0.0, 1.0)
    vals = [ev.predictive_log_density(dm, 0, 0, y, EXP, lam, n_tr=k, normalize=False) for k in (1, 5, 20, 80)]
    assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


def test_truncation_error_bounded_by_tail():
    dm = gaussian_model(0.0, 1.0)
    lam, y = 1.5, 0.3
    short = math.exp(ev.predictive_log_density(dm, 0, 0, y, EXP, lam, n_tr=20, normalize=False))
    long = math.exp(ev.predictive_log_density(dm, 0, 0, y, EXP, lam, n_tr=200, normalize=False))
    # every term beyond 20 is at most the largest density times its ZTP mass
    peak = stats.norm.pdf(0.0, 0.0, 1.0)
    assert 0 <= long - short <= ztp_tail(lam, 20) * peak + 1e-300


def test_duplicated_test_set_doubles_total():
    dm = gaussian_model()
    hpf = missingness_state()
    rng = np.random.default_rng(1)
    rows, cols, y = rng.integers(0, 6, 40), rng.integers(0, 5, 40), rng.normal(size=40)
    one = ev.test_log_likelihood(hpf, dm, EXP, None, 20, (rows, cols, y))
    two = ev.test_log_likelihood(hpf, dm, EXP, None, 20, (np.r_[rows, rows], np.r_[cols, cols], np.r_[y, y]))
    assert two.total == pytest.approx(2 * one.total, rel=1e-14)
    assert two.per_entry == pytest.approx(one.per_entry, rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_total_is_order_invariant_and_additive(seed):
    dm = gaussian_model()
    hpf = missingness_state()
    rng = np.random.default_rng(seed)
    rows, cols, y = rng.integers(0, 6, 30), rng.integers(0, 5, 30), rng.normal(size=30)
    full = ev.test_log_likelihood(hpf, dm, EXP, None, 20, (rows, cols, y))
    perm = rng.permutation(30)
    shuffled = ev.test_log_likelihood(hpf, dm, EXP, None, 20, (rows[perm], cols[perm], y[perm]))
    assert shuffled.total == full.total
    a = ev.test_log_likelihood(hpf, dm, EXP, None, 20, (rows[:13], cols[:13], y[:13]))
    b = ev.test_log_likelihood(hpf, dm, EXP, None, 20, (rows[13:], cols[13:], y[13:]))
    assert a.total + b.total == pytest.approx(full.total, rel=1e-12)


def test_empty_test_set_raises():
    with pytest.raises(DataError):
        ev.test_log_likelihood(None, gaussian_model(), IGNORABLE, None, 20, ([], [], []))


def test_non_ignorable_needs_missingness_model():
    with pytest.raises(ValueError):
        ev.test_log_likelihood(None, gaussian_model(), EXP, None, 20, ([0], [0], [1.0]))


# ---------------------------------------------------------------------------
# point metrics


def test_rmse_r2_examples():
    rmse, r2 = ev.rmse_r2([1, 2, 3], [1, 2, 5])
    assert rmse == pytest.approx(math.sqrt(4 / 3))
    # mean of (1, 2, 5) is 8/3, so the total sum of squares is 26/3
    assert r2 == pytest.approx(7 / 13)
    y = np.array([0.3, 1.2, -0.4, 2.0])
    assert ev.rmse_r2(y, y) == (0.0, 1.0)
    assert ev.rmse_r2(np.full(4, y.mean()), y)[1] == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(UndefinedMetricError):
        ev.rmse_r2([1.0, 2.0], [3.0, 3.0])


def test_predicted_means_scale_with_expected_phi():
    dm = gaussian_model(2.0, 1.0)
    hpf = missingness_state()
    mean_link = Linkage(LinkKind.EXPONENTIAL, 0.5)
    plain = ev.predicted_means(hpf, dm, EXP, [0, 1], [0, 2])
    assert plain == pytest.approx([2.0, 2.0])
    coupled = ev.predicted_means(hpf, dm, EXP, [0, 1], [0, 2], mean_link)
    assert np.all(coupled > 2.0)


def test_eval_report_tsv():
    rep = ev.EvalReport(-10.5, -1.05, 0.5, 0.25, 10)
    lines = rep.to_tsv().splitlines()
    assert lines[0].split("\t") == list(ev.EvalReport.HEADER)
    assert lines[1].split("\t") == ["-10.5", "-1.05", "0.5", "0.25", "10"]


# ---------------------------------------------------------------------------
# heteroscedasticity diagnostic


def test_homoscedastic_residuals_show_no_trend():
    rng = np.random.default_rng(0)
    r = rng.normal(size=10_000)
    p = rng.uniform(size=10_000)
    bins = ev.hetero_diagnostic(r, p)
    assert len(bins) == 100
    assert abs(ev.spearman_trend(bins)) < 0.3
    assert np.mean([b.residual_variance for b in bins]) == pytest.approx(1.0, abs=0.05)


def test_planted_trend_is_detected():
    rng = np.random.default_rng(1)
    p = rng.uniform(size=10_000)
    r = rng.normal(size=10_000) * np.sqrt(0.2 + 2 * p)
    bins = ev.hetero_diagnostic(r, p)
    assert ev.spearman_trend(bins) > 0.8
    means = [b.mean_nonmissing_prob for b in bins]
    assert means == sorted(means)


def test_constant_residuals_give_zero_variance():
    bins = ev.hetero_diagnostic(np.full(500, 0.7), np.linspace(0, 1, 500))
    assert all(b.residual_variance == 0.0 for b in bins)
    assert ev.spearman_trend(bins) == 0.0


def test_bin_counts_balanced():
    rng = np.random.default_rng(2)
    n = 1234
    bins = ev.hetero_diagnostic(rng.normal(size=n), rng.uniform(size=n))
    counts = [b.count for b in bins]
    assert sum(counts) == n
    assert max(counts) - min(counts) <= 1


def test_hetero_accepts_entry_residual_pairs():
    rng = np.random.default_rng(3)
    r = rng.normal(size=300)
    p = rng.uniform(size=300)
    pairs = np.column_stack([np.arange(300), r])
    a = ev.hetero_diagnostic(pairs, p)
    b = ev.hetero_diagnostic(r, p)
    assert a == b


def test_hetero_needs_enough_entries():
    with pytest.raises(DataError):
        ev.hetero_diagnostic(np.zeros(99), np.zeros(99))


# ---------------------------------------------------------------------------
# small-rate check of the compound law


def test_ks_distance_shrinks_with_rate():
    out = ev.verify_theorem2(EdmFamily.GAUSSIAN, 0.5, 1.0, EXP, (1.0, 0.1, 0.01), 100_000, np.random.default_rng(0))
    assert [lam for lam, _ in out] == [1.0, 0.1, 0.01]
    ks = [d for _, d in out]
    assert ks[0] > ks[1] > ks[2]


@pytest.mark.parametrize("link", [Linkage(LinkKind.EXPONENTIAL, 0.0), IGNORABLE])
def test_trivial_link_ks_at_null_scale(link):
    n = 100_000
    out = ev.verify_theorem2(EdmFamily.GAMMA, -1.0, 2.0, link, (1.0, 0.1, 0.01), n, np.random.default_rng(4))
    null_95 = 1.36 * math.sqrt(2.0 / n)
    for _, d in out:
        assert d < null_95


def test_verify_is_reproducible():
    a = ev.verify_theorem2(EdmFamily.POISSON, 0.2, 1.0, EXP, (1.0, 0.1), 20_000, np.random.default_rng(9))
    b = ev.verify_theorem2(EdmFamily.POISSON, 0.2, 1.0, EXP, (1.0, 0.1), 20_000, np.random.default_rng(9))
    assert a == b
