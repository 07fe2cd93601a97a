import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from intertwine import algebra as A
from intertwine import kernels as K
from intertwine.diffusion import bessel, brownian
from intertwine.verify import GridSpec, harmonicity_check


def P(*v):
    return np.array([v], dtype=float)


ones = lambda x: np.ones(np.shape(x)[:-1])
arcsine = lambda y: 1.0 / (np.pi * np.sqrt(1.0 - np.asarray(y)[..., 0] ** 2))


# -- compose -------------------------------------------------------------------------


def test_compose_uniforms_gives_log():
    c = A.compose(K.pitman_kernel(), K.pitman_kernel())
    assert float(c.density(P(1.0), P(0.5))[0]) == pytest.approx(np.log(2.0), abs=1e-8)
    s = np.linspace(0.05, 0.95, 10)[:, None]
    assert np.allclose(c.density(P(1.0), s), -np.log(s[:, 0]), atol=1e-8)
    # -log s has an integrable singularity at 0, so use an adaptive rule for the mass
    mass, _ = integrate.quad(lambda v: float(c.density(P(1.0), P(v))[0]), 0, 1, limit=200)
    assert mass == pytest.approx(1.0, abs=1e-5)


def test_compose_with_mollifier_is_near_identity():
    eps = 1e-2
    c = A.compose(K.gaussian_kernel(eps), K.cauchy_kernel())
    cau = K.cauchy_kernel()
    s = np.linspace(-3, 3, 13)[:, None]
    for y in (-0.5, 0.0, 1.2):
        diff = np.abs(c.density(P(y), s) - cau.density(P(y), s))
        assert diff.max() < eps ** 2


def test_compose_beta_gamma_chain():
    # Beta(a'+b', b) * Beta(a', b') is Beta(a', b + b')
    c = A.compose(K.beta_gamma_kernel(3.0, 2.0), K.beta_gamma_kernel(2.0, 1.0))
    assert K.kernel_mass(c, P(1.0))[0] == pytest.approx(1.0, abs=1e-5)
    want = K.beta_gamma_kernel(2.0, 3.0)
    s = np.linspace(0.1, 1.9, 9)[:, None]
    assert np.allclose(c.density(P(2.0), s), want.density(P(2.0), s), atol=1e-6)


def test_compose_associative():
    p = K.pitman_kernel()
    left = A.compose(A.compose(p, p, n=24), p, n=24)
    right = A.compose(p, A.compose(p, p, n=24), n=24)
    y, s = 2.0, np.array([[0.1], [0.4], [1.0], [1.7]])
    a, b = left.density(P(y), s), right.density(P(y), s)
    assert np.max(np.abs(a - b)) <= 1e-4
    # independent closed form: the product of three uniforms has density log(y/s)^2 / (2 y)
    assert np.allclose(a, np.log(y / s[:, 0]) ** 2 / (2 * y), atol=1e-4)


def test_compose_rejects_mismatch():
    with pytest.raises(A.AlgebraError):
        A.compose(K.dixon_anderson_kernel(2), K.pitman_kernel())
    with pytest.raises(A.AlgebraError):
        A.compose(K.pitman_indicator(), K.pitman_kernel())


# -- dual ----------------------------------------------------------------------------


def _torus():
    k = 2 * np.pi
    return K.torus_wave_kernel(lambda u: np.cos(k * u), lambda u: -k * np.sin(k * u), 2.0, 0.0, period=1.0)


def test_torus_wave_is_self_dual():
    link = _torus()
    dl = A.dual(link, A.InvariantDensityPair(ones, ones, (0.0, 1.0), (0.0, 1.0)))
    g = np.linspace(0.02, 0.98, 9)
    X, Y = np.meshgrid(g, g, indexing="ij")
    xs, ys = X.reshape(-1, 1), Y.reshape(-1, 1)
    assert np.allclose(dl.density(xs, ys), link.density(ys, xs), rtol=1e-12)


def _cheb_pair():
    return A.InvariantDensityPair(lambda x: ones(x) / (2 * np.pi), arcsine, (0.0, 2 * np.pi), (-1.0, 1.0))


def test_chebyshev_dual_is_stochastic():
    dl = A.dual(K.chebyshev_torus_kernel({1: 0.5, 2: 0.3}), _cheb_pair())
    xs = np.linspace(0.1, 6.0, 8)
    for x in xs:
        mass, _ = integrate.quad(lambda y: float(dl.density(P(x), P(y))[0]), -1, 1, limit=200)
        assert mass == pytest.approx(1.0, abs=1e-4)


def test_dual_involution():
    link = K.chebyshev_torus_kernel({1: 0.5, 3: 0.2})
    pair = _cheb_pair()
    back = A.dual(A.dual(link, pair), pair.swapped())
    ys = np.linspace(-0.9, 0.9, 7)[:, None]
    xs = np.linspace(0.2, 6.0, 7)[:, None]
    orig = link.density(ys, xs)
    assert np.max(np.abs(back.density(ys, xs) - orig) / orig) <= 1e-8


def test_dual_rejects_sigma_finite_pitman_pair():
    sq = lambda y: np.asarray(y)[..., 0] ** 2
    with pytest.raises(A.AlgebraError):
        A.dual(K.pitman_kernel(), A.InvariantDensityPair(ones, sq, (0.0, np.inf), (0.0, np.inf), probability=False))


def test_dual_rejects_wrong_invariant_pair():
    # a uniform h2 on (-1, 1) does not reproduce h1 once the T_2 coefficient is nonzero
    pair = A.InvariantDensityPair(lambda x: ones(x) / (2 * np.pi), lambda y: ones(y) / 2, (0.0, 2 * np.pi), (-1.0, 1.0))
    with pytest.raises(A.AlgebraError):
        A.dual(K.chebyshev_torus_kernel({2: 0.4}), pair)


@settings(max_examples=8, deadline=None)
@given(c1=st.floats(-0.45, 0.45), c2=st.floats(-0.45, 0.45))
def test_dual_involution_property(c1, c2):
    link = K.chebyshev_torus_kernel({1: c1, 2: c2})
    pair = _cheb_pair()
    back = A.dual(A.dual(link, pair), pair.swapped())
    ys = np.array([[-0.7], [0.1], [0.8]])
    xs = np.array([[0.4], [2.5], [5.1]])
    orig = link.density(ys, xs)
    assert np.all(np.abs(back.density(ys, xs) - orig) <= 1e-8 * orig)


# -- normalize -----------------------------------------------------------------------


def test_normalize_constant_multiple():
    nk = A.normalize(A.scaled(K.cauchy_kernel(), 2.0))
    ys = np.array([[-1.0], [0.0], [2.5]])
    assert np.allclose(nk.tau(ys), 2.0, atol=1e-5)
    xs = np.array([[0.3], [-0.4], [4.0]])
    assert np.allclose(nk.xi.density(ys, xs), K.cauchy_kernel().density(ys, xs), rtol=1e-5)
    assert np.allclose(nk.htransform_drift_delta(ys), 0.0, atol=1e-4)


def test_normalize_pitman_indicator():
    nk = A.normalize(K.pitman_indicator())
    ys = np.array([[0.5], [1.0], [3.0]])
    assert np.allclose(nk.tau(ys), ys[:, 0], rtol=1e-8)
    assert np.allclose(nk.xi.density(ys, 0.5 * ys), 1.0 / ys[:, 0], rtol=1e-8)
    # Y = BM turns into Bessel(3): drift delta 1/y
    assert np.allclose(nk.htransform_drift_delta(ys)[:, 0], 1.0 / ys[:, 0], rtol=1e-5)
    rep = harmonicity_check(nk.tau, brownian(1), GridSpec(((0.5, 5.0),), (10,), h=1e-3))
    assert rep.passed


def test_normalize_invariants():
    nk = A.normalize(A.scaled(K.beta_gamma_kernel(2, 2), 3.0))
    ys = np.array([[0.7], [2.0]])
    xs = 0.4 * ys
    orig = 3.0 * K.beta_gamma_kernel(2, 2).density(ys, xs)
    assert np.allclose(nk.xi.density(ys, xs) * nk.tau(ys), orig, rtol=1e-10)
    assert np.allclose(K.kernel_mass(nk.xi, ys), 1.0, atol=1e-6)


def test_normalize_rejects_non_integrable():
    with pytest.raises(A.AlgebraError):
        A.normalize(K.half_line_indicator("above"))


def test_spherical_mean_conservation_fit():
    u, _ = K.gaussian_density(3)
    link = K.spherical_mean_kernel(u, 3)
    coarse = K.spherical_mean_kernel(u, 3, n_theta=8, n_phi=16)
    nk = A.normalize(link, bessel(3.0), mass_link=coarse)
    r = np.linspace(0.3, 2.0, 8)
    a, b, res = A.fit_conservation(r, nk.tau(r[:, None]), 3)
    assert res < 1e-4
    assert a == pytest.approx(1.0, abs=1e-4)


def test_fit_conservation_exact():
    r = np.linspace(0.5, 3, 20)
    a, b, res = A.fit_conservation(r, 1.0 + 2.0 * r ** -2, 4)
    assert (a, b) == (pytest.approx(1.0), pytest.approx(2.0))
    assert res < 1e-12


@settings(max_examples=20, deadline=None)
@given(c=st.floats(0.1, 50.0))
def test_normalize_undoes_scaling(c):
    nk = A.normalize(A.scaled(K.pitman_kernel(), c))
    ys = np.array([[0.5], [2.0]])
    assert np.allclose(nk.tau(ys), c, rtol=1e-8)
    assert np.allclose(nk.xi.density(ys, 0.3 * ys), 1.0 / ys[:, 0], rtol=1e-8)


# -- combine_orthogonal ----------------------------------------------------------------


@pytest.fixture(scope="module")
def dyson_pair():
    return A.combine_orthogonal(K.half_line_indicator("above"), K.half_line_indicator("below"), ones, brownian(1), n=8)


def test_combined_eta_and_drift(dyson_pair):
    rng = np.random.default_rng(0)
    x = rng.uniform(-2, 1, 32)
    z = np.stack([x, x + rng.uniform(0.2, 2.0, 32)], axis=1)
    gap = z[:, 1] - z[:, 0]
    assert np.allclose(dyson_pair.eta(z), gap, atol=1e-10)
    drift = dyson_pair.combined_drift(z)
    assert np.allclose(drift, np.stack([-1 / gap, 1 / gap], axis=1), atol=1e-6)


def test_combined_psi_uniform(dyson_pair):
    z = np.array([[-1.0, 0.5], [0.0, 2.0]])
    s = z[:, :1] + 0.3 * (z[:, 1:] - z[:, :1])
    assert np.allclose(dyson_pair.psi.density(z, s), 1 / (z[:, 1] - z[:, 0]), rtol=1e-8)
    assert np.allclose(K.kernel_mass(dyson_pair.psi, z), 1.0, atol=1e-5)
    out = np.array([[-1.5], [2.5]])
    assert np.all(dyson_pair.psi.density(z, out) == 0)


def test_combined_eta_psi_product(dyson_pair):
    z = np.array([[-0.5, 0.7]])
    s = np.linspace(-0.4, 0.6, 5)[:, None]
    lhs = dyson_pair.eta(z) * dyson_pair.psi.density(z, s)
    assert np.allclose(lhs, 1.0, rtol=1e-8)


def test_combined_eta_harmonic(dyson_pair):
    rep = harmonicity_check(dyson_pair.eta, dyson_pair.base_spec, GridSpec(((-2.0, -0.5), (0.5, 2.0)), (8, 8), h=1e-3))
    assert rep.passed


def test_combine_rejects_non_orthogonal():
    g = K.gaussian_kernel(1.0)
    with pytest.raises(A.AlgebraError):
        A.combine_orthogonal(g, g, ones, brownian(1), n=8)


def test_product_spec_blocks():
    spec = A.product_spec(brownian(1), bessel(3.0))
    z = np.array([[0.2, 2.0]])
    assert np.allclose(spec.b(z), [[0.0, 0.5]])
    assert np.allclose(spec.a(z)[0], np.eye(2))
