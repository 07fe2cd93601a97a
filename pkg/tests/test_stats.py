import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.stats import cauchy, maxwell, norm

from intertwine import kernels as K
from intertwine import stats as T
from intertwine.diffusion import bessel, brownian, squared_bessel
from intertwine.sde import build_system, pitman_2m_minus_b, simulate, simulate_interlaced

uniform01 = lambda s: np.clip(s, 0.0, 1.0)


@pytest.fixture(scope="module")
def cauchy_ens():
    sys_ = build_system(brownian(1), brownian(1), K.cauchy_kernel())
    return simulate(sys_, sys_.initial_sampler(0.0), 1e-2, 1.0, 20_000, 21, record_every=0.25)


@pytest.fixture(scope="module")
def cauchy_mutated():
    sys_ = build_system(brownian(1), brownian(1), K.cauchy_kernel(), mutate=True)
    return simulate(sys_, sys_.initial_sampler(0.0), 1e-2, 1.0, 20_000, 21, record_every=0.25)


@pytest.fixture(scope="module")
def pitman_ens():
    return pitman_2m_minus_b(1e-3, 1.0, 20_000, 22, record_every=0.5)


# -- KS and chi-square ---------------------------------------------------------------


def test_ks_perfect_fit():
    n = 1000
    rep = T.ks_statistic(norm.ppf(np.arange(1, n + 1) / (n + 1)), norm.cdf)
    assert rep.statistic == pytest.approx(1 / (n + 1), rel=1e-6)
    assert rep.passed


def test_ks_gross_mismatch():
    x = np.sort(np.random.default_rng(0).random(10_000))
    rep = T.ks_statistic(x, norm.cdf)
    assert rep.statistic > 0.1 and not rep.passed


def test_ks_threshold_value():
    assert T.ks_threshold(10_000) == pytest.approx(0.01628, abs=5e-6)
    assert T.ks_threshold(100_000, 0.01) == pytest.approx(0.01628 / np.sqrt(10), rel=1e-3)


def test_ks_input_errors():
    with pytest.raises(ValueError):
        T.ks_statistic(np.array([0.5, 0.1] * 100), uniform01)
    with pytest.raises(T.InconclusiveError):
        T.ks_statistic(np.linspace(0, 1, 50), uniform01)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(100, 2000), seed=st.integers(0, 2**32 - 1))
def test_ks_statistic_bounds_and_scipy_agreement(n, seed):
    from scipy.stats import kstest

    x = np.sort(np.random.default_rng(seed).normal(size=n))
    rep = T.ks_statistic(x, norm.cdf)
    assert 1 / (2 * n) <= rep.statistic <= 1
    assert rep.statistic == pytest.approx(kstest(x, norm.cdf).statistic, abs=1e-12)


def test_chi2():
    exp = np.full(10, 100.0)
    assert T.chi2_test(exp, exp).passed
    obs = exp.copy()
    obs[0] += 80
    obs[1] -= 80
    assert not T.chi2_test(obs, exp).passed
    with pytest.raises(T.InconclusiveError):
        T.chi2_test(np.ones(5), np.ones(5))


# -- marginal and conditional ---------------------------------------------------------


def test_marginal_cauchy(cauchy_ens):
    assert T.marginal_check(cauchy_ens, "y", 1.0, norm.cdf).passed

    # Cauchy(0) start plus an independent N(0, 1) increment, by Gauss-Hermite in the normal variable
    s, w = np.polynomial.hermite_e.hermegauss(80)
    conv_cdf = lambda v: cauchy.cdf(v[:, None] - s) @ w / np.sqrt(2 * np.pi)
    u = np.linspace(-5, 5, 11)
    slow = [integrate.quad(lambda r: cauchy.cdf(x - r) * norm.pdf(r), -np.inf, np.inf)[0] for x in u]
    assert np.allclose(conv_cdf(u), slow, atol=1e-8)
    assert T.marginal_check(cauchy_ens, "x", 1.0, conv_cdf).passed


def test_marginal_pitman_maxwell(pitman_ens):
    assert T.marginal_check(pitman_ens, "y", 1.0, maxwell.cdf).passed
    with pytest.raises(ValueError):
        T.marginal_check(pitman_ens, "y", 0.3, maxwell.cdf)


@pytest.mark.parametrize("t", [0.25, 1.0])
def test_conditional_cauchy_pivot(cauchy_ens, t):
    rep = T.conditional_link_check(cauchy_ens, t, pivot=lambda x, y: x[:, 0] - y[:, 0], reference_cdf=cauchy.cdf)
    assert rep.passed


def test_conditional_pivot_and_binned_agree(cauchy_ens):
    piv = T.conditional_link_check(cauchy_ens, 1.0, pivot=lambda x, y: x[:, 0] - y[:, 0], reference_cdf=cauchy.cdf)
    binned = T.conditional_link_check(cauchy_ens, 1.0, K.cauchy_kernel(), n_bins=10)
    assert piv.passed and binned.passed
    assert binned.context["method"] == "binned-pit"


def test_conditional_pitman(pitman_ens):
    rep = T.conditional_link_check(pitman_ens, 1.0, pivot=lambda x, y: x[:, 0] / y[:, 0], reference_cdf=uniform01)
    assert rep.passed
    assert T.conditional_link_check(pitman_ens, 1.0, K.pitman_kernel(), n_bins=8).passed
    with pytest.raises(T.InconclusiveError):
        T.conditional_link_check(pitman_ens, 1.0, K.pitman_kernel(), n_bins=50)


def test_conditional_interlaced():
    ens = simulate_interlaced(2, 1e-3, 0.5, 10_000, 23, record_every=0.49)
    rep = T.conditional_link_check(ens, 0.5, pivot=lambda x, y: (x[:, 0] - y[:, 0]) / (y[:, 1] - y[:, 0]),
                                   reference_cdf=uniform01)
    assert rep.passed


def test_conditional_detects_mutation(cauchy_mutated):
    rep = T.conditional_link_check(cauchy_mutated, 1.0, pivot=lambda x, y: x[:, 0] - y[:, 0], reference_cdf=cauchy.cdf)
    assert not rep.passed


# -- semigroup ------------------------------------------------------------------------


def test_semigroup_cauchy_symmetric():
    sys_ = build_system(brownian(1), brownian(1), K.cauchy_kernel())
    f = lambda x: norm.cdf(-x / 0.05)
    rep = T.semigroup_check(sys_, f, 1.0, 0.0, 20_000, 24, dt=1e-2)
    assert rep.passed
    assert rep.context["QLf"] == pytest.approx(0.5, abs=3 * rep.context["se"] + 0.01)


def test_semigroup_beta_gamma_separate():
    sys_ = build_system(squared_bessel(2.0), squared_bessel(4.0), K.beta_gamma_kernel(1, 1))
    rep = T.semigroup_check(sys_, lambda x: np.minimum(x, 5.0), 0.5, 1.0, 20_000, 25, dt=1e-3, mode="separate")
    assert rep.passed


def test_semigroup_detects_mutation(cauchy_ens, cauchy_mutated):
    sys_ = build_system(brownian(1), brownian(1), K.cauchy_kernel())
    f = lambda x: np.exp(-x * x)
    assert T.semigroup_check(sys_, f, 1.0, 0.0, 0, 0, ensemble=cauchy_ens).passed
    assert not T.semigroup_check(sys_, f, 1.0, 0.0, 0, 0, ensemble=cauchy_mutated).passed


def test_semigroup_inconclusive():
    sys_ = build_system(brownian(1), brownian(1), K.cauchy_kernel())
    with pytest.raises(T.InconclusiveError):
        T.semigroup_check(sys_, lambda x: np.exp(-x * x), 1.0, 0.0, 50, 1)
    with pytest.raises(T.InconclusiveError):
        # a centred signal has scale near zero, so any standard error is too large
        T.semigroup_check(sys_, lambda x: np.tanh(x), 1.0, 0.0, 200, 1, dt=1e-2)


# -- independence -----------------------------------------------------------------------


def test_independence_pitman(pitman_ens):
    assert T.independence_check(pitman_ens, 1.0, lambda x, y: (x[:, 0] / y[:, 0], y[:, 0])).passed


def test_independence_cauchy(cauchy_ens, cauchy_mutated):
    piv = lambda x, y: (x[:, 0] - y[:, 0], y[:, 0])
    assert T.independence_check(cauchy_ens, 1.0, piv, "spearman").passed
    assert not T.independence_check(cauchy_mutated, 1.0, piv, "spearman").passed


def test_independence_degenerate(pitman_ens):
    with pytest.raises(ValueError):
        T.independence_check(pitman_ens, 1.0, lambda x, y: (np.ones(len(x)), y[:, 0]))


# -- martingale -------------------------------------------------------------------------


def test_martingale_constant_tau():
    ens = simulate(brownian(1), [0.0], 0.1, 1.0, 2000, 26)
    rep = T.martingale_check(lambda y: np.ones(len(y)), ens)
    assert rep.statistic == 0.0 and rep.passed


def test_martingale_bm():
    ens = simulate(brownian(1), [0.5], 0.05, 1.0, 20_000, 27)
    assert T.martingale_check(lambda y: y[:, 0], ens).passed


def test_martingale_bessel_inverse_stopped():
    # a fine record grid keeps the bridge crossing test close to the drifted path near the lower barrier
    ens = simulate(bessel(3.0), [1.0], 1e-3, 0.5, 20_000, 28, record_every=0.01)
    rep = T.martingale_check(lambda y: 1.0 / y[:, 0], ens, stop=(0.05, 20.0), variance=1.0)
    assert rep.passed


def test_martingale_detects_drift():
    from intertwine.diffusion import brownian_drift

    ens = simulate(brownian_drift([0.5]), [0.0], 0.05, 1.0, 20_000, 29)
    assert not T.martingale_check(lambda y: y[:, 0], ens).passed


def test_martingale_unbounded_needs_stopping():
    ens = simulate(brownian(1), [0.0], 0.1, 1.0, 1000, 30)
    with pytest.raises(ValueError):
        T.martingale_check(lambda y: np.exp(40 * y[:, 0]), ens)
