import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.special import k0
from scipy.stats import kstest, norm

from intertwine import kernels as K
from intertwine.convergence import rbm_example_link
from intertwine.diffusion import apply_generator, bessel


def P(*v):
    return np.array([v], dtype=float)


def val(link, y, x):
    return float(link.density(P(*y), P(*x))[0])


# -- closed-form values ------------------------------------------------------------


def test_cauchy_values():
    c = K.cauchy_kernel()
    assert val(c, [0], [0]) == pytest.approx(1 / np.pi, rel=1e-12)
    assert float(c.grad_log_y(P(1.0), P(0.0))[0, 0]) == pytest.approx(-1.0)
    assert K.kernel_mass(c, P(0.0))[0] == pytest.approx(1.0, abs=1e-5)


def test_beta_gamma_values():
    uni = K.beta_gamma_kernel(1, 1)
    assert val(uni, [2.0], [0.3]) == pytest.approx(0.5)
    bg = K.beta_gamma_kernel(2, 2)
    assert val(bg, [2.0], [1.0]) == pytest.approx(0.75, rel=1e-12)
    for y in (0.5, 1.0, 7.0):
        assert K.kernel_mass(bg, P(y))[0] == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(K.KernelError):
        K.beta_gamma_kernel(0.0, 1.0)


def test_pitman_values():
    p = K.pitman_kernel()
    for x in (0.1, 1.5, 2.9):
        assert val(p, [3.0], [x]) == pytest.approx(1 / 3)
    assert float(p.grad_log_y(P(2.0), P(1.0))[0, 0]) == pytest.approx(-0.5)
    h = apply_generator(bessel(3.0), lambda y: p.density(y, np.array([0.5])), P(2.0), 1e-3)[0]
    assert abs(h) < 1e-6


def test_dixon_anderson_values():
    d1 = K.dixon_anderson_kernel(1)
    assert val(d1, [-1.0, 3.0], [0.2]) == pytest.approx(0.25)
    d2 = K.dixon_anderson_kernel(2)
    assert val(d2, [0.0, 1.0, 2.0], [0.5, 1.5]) == pytest.approx(1.0, rel=1e-12)
    # 2d mass by an independent adaptive quadrature over the interlacing box
    mass, _ = integrate.dblquad(lambda x2, x1: val(d2, [0, 1, 3], [x1, x2]), 0, 1, 1, 3, epsabs=1e-10)
    assert mass == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(K.KernelError):
        d2.density(P(0.0, 2.0, 1.0), P(0.5, 1.5))


def test_chebyshev_values():
    c = K.chebyshev_torus_kernel({1: 0.5})
    xs = np.linspace(0, 2 * np.pi, 50)[:, None]
    for y in (-1.0, 0.0, 1.0):
        d = c.density(np.array([y]), xs)
        assert np.allclose(d, (1 + 0.5 * y * np.cos(xs[:, 0])) / (2 * np.pi))
        assert d.min() >= 0.5 / (2 * np.pi) - 1e-15
        assert K.kernel_mass(c, P(y))[0] == pytest.approx(1.0, abs=1e-12)
    empty = K.chebyshev_torus_kernel({})
    assert val(empty, [0.3], [1.0]) == pytest.approx(1 / (2 * np.pi))
    with pytest.raises(K.KernelError):
        K.chebyshev_torus_kernel({1: 0.7, 2: 0.5})


def test_chebyshev_recurrence_matches_cosine_form():
    c = K.chebyshev_torus_kernel({3: 0.4, 5: 0.2})
    th, x = 0.7, 1.3
    want = (1 + 0.4 * np.cos(3 * th) * np.cos(3 * x) + 0.2 * np.cos(5 * th) * np.cos(5 * x)) / (2 * np.pi)
    assert val(c, [np.cos(th)], [x]) == pytest.approx(want, rel=1e-12)


def test_appendix_kernels():
    d = K.dalembert_kernel(norm.pdf, lambda s: -s * norm.pdf(s))
    assert val(d, [0.0], [0.0]) == pytest.approx(norm.pdf(0.0), rel=1e-12)
    # (cos(y-x) + 2)/2 normalized over a 2 pi period
    tw = K.torus_wave_kernel(np.cos, lambda u: -np.sin(u), 2.0, 0.0, period=2 * np.pi)
    assert val(tw, [0.0], [0.0]) == pytest.approx(1.5 / (2 * np.pi), rel=1e-12)
    u, draw = K.gaussian_density(2)
    sm = K.spherical_mean_kernel(u, 2, draw)
    assert val(sm, [1e-6], [0.0, 0.0]) == pytest.approx(1 / (2 * np.pi), rel=1e-9)


def test_whittaker_normalizer_and_mass():
    # psi at y = (0, 0), a = 0 is int exp(-2 cosh x) dx = 2 K_0(2)
    psi = K.whittaker_psi(2, [0.0, 0.0], P(0.0, 0.0))[0]
    assert psi == pytest.approx(2 * k0(2.0), rel=1e-6)
    w = K.whittaker_link(2, [0.0, 0.0])
    assert K.kernel_mass(w, P(0.0, 1.0))[0] == pytest.approx(1.0, abs=1e-4)
    g = w.grad_log_y(P(0.0, 1.0), P(0.4))[0]
    h = 1e-5
    fd = [(np.log(val(w, [0 + h * (i == 0), 1 + h * (i == 1)], [0.4]))
           - np.log(val(w, [0 - h * (i == 0), 1 - h * (i == 1)], [0.4]))) / (2 * h) for i in range(2)]
    assert np.allclose(g, fd, atol=1e-3)


# -- samplers -----------------------------------------------------------------


def test_sampler_cauchy():
    x = K.sampler_for(K.cauchy_kernel()).draw(np.array([5.0]), np.random.default_rng(1), size=100_000)
    assert kstest(x[:, 0] - 5.0, "cauchy").statistic < 0.02


def test_sampler_pitman_and_da1():
    rng = np.random.default_rng(2)
    x = K.sampler_for(K.pitman_kernel()).draw(np.array([2.0]), rng, size=100_000)
    assert kstest(x[:, 0] / 2.0, "uniform").statistic < 0.02
    x = K.sampler_for(K.dixon_anderson_kernel(1)).draw(np.array([0.0, 1.0]), rng, size=100_000)
    assert kstest(x[:, 0], "uniform").statistic < 0.02


def test_sampler_generic_table_matches_cdf():
    link = K.beta_gamma_kernel(2.0, 3.0)
    x = K.sampler_for(link).draw(np.array([1.0]), np.random.default_rng(3), size=50_000)
    assert kstest(x[:, 0], "beta", args=(2.0, 3.0)).statistic < 0.02


def test_sampler_rejects_sigma_finite():
    with pytest.raises(K.KernelError):
        K.sampler_for(K.half_line_indicator("above"))


def test_sampler_reproducible():
    s = K.sampler_for(K.cauchy_kernel())
    a = s.draw(np.zeros((100, 1)), np.random.Generator(np.random.Philox(5)))
    b = s.draw(np.zeros((100, 1)), np.random.Generator(np.random.Philox(5)))
    assert np.array_equal(a, b)


# -- invariants across the catalog ------------------------------------------------


def _catalog():
    u, draw = K.gaussian_density(3)
    return [
        (K.cauchy_kernel(), lambda r: r.uniform(-3, 3, 1), lambda r, y: y + r.uniform(-3, 3, 1)),
        (K.beta_gamma_kernel(2, 2), lambda r: r.uniform(0.5, 5, 1), lambda r, y: y * r.uniform(0.1, 0.9, 1)),
        (K.pitman_kernel(), lambda r: r.uniform(0.5, 5, 1), lambda r, y: y * r.uniform(0.1, 0.9, 1)),
        (K.dixon_anderson_kernel(1), lambda r: np.sort(r.uniform(-2, 2, 2)) + [0, 0.3],
         lambda r, y: y[:1] + (y[1:] - y[:1]) * r.uniform(0.1, 0.9, 1)),
        (K.chebyshev_torus_kernel({1: 0.5, 2: 0.3}), lambda r: r.uniform(-0.9, 0.9, 1),
         lambda r, y: r.uniform(0, 2 * np.pi, 1)),
        (K.spherical_mean_kernel(u, 3, draw), lambda r: r.uniform(0.3, 2.0, 1), lambda r, y: r.uniform(-1, 1, 3)),
        (rbm_example_link(2), lambda r: r.uniform(-1, 1, 1), lambda r, y: r.uniform(0.05, 0.95, 1)),
    ]


@pytest.mark.parametrize("idx", range(7))
def test_grad_log_y_matches_finite_differences(idx):
    link, ys, xs = _catalog()[idx]
    rng = np.random.default_rng(idx)
    h = 1e-6
    for _ in range(20):
        y = ys(rng)
        x = xs(rng, y)
        g = link.grad_log_y(y[None, :], x[None, :])[0]
        fd = np.empty(len(y))
        for i in range(len(y)):
            e = np.zeros(len(y))
            e[i] = h
            fd[i] = (np.log(link.density(y + e, x)) - np.log(link.density(y - e, x))) / (2 * h)
        assert np.allclose(g, fd, rtol=1e-4, atol=1e-5), (link.name, y, x, g, fd)


@pytest.mark.parametrize("idx", [0, 1, 2, 3, 4, 6])
def test_stochastic_kernels_have_unit_mass(idx):
    link, ys, _ = _catalog()[idx]
    rng = np.random.default_rng(10 + idx)
    y = np.stack([ys(rng) for _ in range(5)])
    assert np.allclose(K.kernel_mass(link, y), 1.0, atol=1e-5 if link.heavy_tail else 1e-6)


@settings(max_examples=40, deadline=None)
@given(a=st.floats(0.5, 4.0), b=st.floats(0.5, 4.0), y=st.floats(0.2, 10.0), u=st.floats(0.01, 0.99))
def test_beta_gamma_density_nonnegative_and_scaled(a, b, y, u):
    link = K.beta_gamma_kernel(a, b)
    d = val(link, [y], [u * y])
    assert d >= 0
    # scaling: y Lambda(y, u y) does not depend on y
    assert y * d == pytest.approx(2.0 * val(link, [2.0], [2.0 * u]), rel=1e-10)


@settings(max_examples=30, deadline=None)
@given(c1=st.floats(-0.5, 0.5), c2=st.floats(-0.5, 0.5), y=st.floats(-1, 1), x=st.floats(0, 2 * np.pi))
def test_chebyshev_nonnegative_when_coefficients_summable(c1, c2, y, x):
    link = K.chebyshev_torus_kernel({1: c1, 2: c2})
    assert val(link, [y], [x]) >= -1e-15


def test_conditional_cdf_matches_closed_form():
    c = K.cauchy_kernel()
    y = np.array([[0.3], [-1.0]])
    x = np.array([[1.0], [-4.0]])
    assert np.allclose(K.conditional_cdf(c, y, x), 0.5 + np.arctan(x - y)[:, 0] / np.pi, atol=1e-6)


def test_reparametrized_chebyshev_intertwines_angle_process():
    from intertwine.diffusion import circle_brownian, reflected_brownian
    from intertwine.verify import GridSpec, pde_residual

    link = K.chebyshev_torus_kernel({1: 0.5, 2: 0.3})
    ang = K.reparametrize_y(link, np.cos, lambda th: -np.sin(th))
    th = np.array([[0.4], [1.3], [2.9]])
    x = np.array([[0.2], [3.0], [5.5]])
    assert np.allclose(ang.density(th, x), link.density(np.cos(th), x))
    h = 1e-6
    fd = (np.log(ang.density(th + h, x)) - np.log(ang.density(th - h, x))) / (2 * h)
    assert np.allclose(ang.grad_log_y(th, x)[:, 0], fd, atol=1e-7)
    grid = GridSpec(((0.1, 3.0), (0.0, 2 * np.pi)), (16, 16), h=1e-3)
    assert pde_residual(ang, circle_brownian(2 * np.pi), reflected_brownian(0.0, np.pi), grid).passed
    draws = K.sampler_for(ang).draw(np.full((4000, 1), 1.0), np.random.default_rng(1))
    assert kstest(draws[:, 0], lambda v: link.cdf(np.full((len(v), 1), np.cos(1.0)), v[:, None])).statistic < 0.03
