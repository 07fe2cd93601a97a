import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import halfnorm, kstest, norm

from intertwine import kernels as K
from intertwine import sde as S
from intertwine.diffusion import bessel, brownian, jacobi, ornstein_uhlenbeck, reflected_brownian
from intertwine.domains import box, half_line


# -- drift assembly ----------------------------------------------------------------


def test_cauchy_z_drift():
    sys_ = S.build_system(brownian(1), brownian(1), K.cauchy_kernel())
    x = np.array([[0.0], [1.0], [-2.0]])
    y = np.array([[0.5], [-1.0], [3.0]])
    d = y[:, 0] - x[:, 0]
    want = np.stack([np.zeros(3), -2 * d / (1 + d * d)], axis=1)
    assert np.allclose(sys_.z_drift(x, y), want, atol=1e-12)


def test_pitman_z_drift():
    # the Bessel(3) drift 1/y is cancelled by grad log (1/y); Z2 is pushed by the moving face instead
    sys_ = S.build_system(reflected_brownian(0.0), bessel(3.0), K.pitman_kernel())
    y = np.array([[0.5], [2.0]])
    assert np.allclose(sys_.z_drift(0.3 * y, y), 0.0, atol=1e-12)
    from intertwine.algebra import normalize

    assert np.allclose(normalize(K.pitman_indicator()).htransform_drift_delta(y)[:, 0], 1 / y[:, 0], rtol=1e-5)


def test_chebyshev_z_drift_matches_components():
    link = K.chebyshev_torus_kernel({1: 0.5, 2: 0.3})
    from intertwine.diffusion import circle_brownian

    sys_ = S.build_system(circle_brownian(2 * np.pi), jacobi(), link)
    y = np.array([[-0.4], [0.2], [0.7]])
    x = np.array([[0.3], [2.0], [4.5]])
    h = 1e-6
    fd = (np.log(link.density(y + h, x)) - np.log(link.density(y - h, x))) / (2 * h)
    spec = jacobi()
    want = spec.b(y)[:, 0] + spec.a(y)[:, 0, 0] * fd
    assert np.allclose(sys_.z_drift(x, y)[:, 1], want, atol=1e-7)
    assert np.allclose(sys_.z_drift(x, y)[:, 0], 0.0)


def test_mutated_drift_negates_link_term():
    sys_ = S.build_system(brownian(1), brownian(1), K.cauchy_kernel(), mutate=True)
    x, y = np.array([[0.0]]), np.array([[1.0]])
    assert sys_.z_drift(x, y)[0, 1] == pytest.approx(1.0)


def test_build_system_dimension_mismatch():
    with pytest.raises(ValueError):
        S.build_system(brownian(2), brownian(1), K.cauchy_kernel())


# -- Euler-Maruyama -------------------------------------------------------------------


def test_brownian_moments():
    ens = S.simulate(brownian(1), [0.0], 0.1, 1.0, 100_000, 1)
    z = ens.at(1.0)[:, 0]
    assert abs(z.mean()) < 0.01
    assert abs(z.var() - 1.0) < 0.02
    assert np.all(np.isfinite(ens.paths))


def test_ou_mean():
    for dt in (1e-2, 5e-3):
        ens = S.simulate(ornstein_uhlenbeck(), [2.0], dt, 1.0, 40_000, 2, record_every=1.0)
        err = abs(ens.at(1.0)[:, 0].mean() - 2 * np.exp(-1))
        # weak order one plus Monte Carlo error
        assert err < 0.02
        assert err < 2 * dt + 4 * 0.66 / np.sqrt(40_000)


def test_cauchy_coupled_y_is_brownian():
    sys_ = S.build_system(brownian(1), brownian(1), K.cauchy_kernel())
    ens = S.simulate(sys_, sys_.initial_sampler(0.0), 1e-2, 1.0, 20_000, 3, record_every=1.0)
    assert abs(ens.y_at(1.0)[:, 0].var() - 1.0) < 0.03
    assert kstest(ens.x_at(0.0)[:, 0], "cauchy").statistic < 0.02


def test_simulate_rejects_bad_grid():
    with pytest.raises(ValueError):
        S.simulate(brownian(1), [0.0], 0.3, 1.0, 10, 1)
    with pytest.raises(ValueError):
        S.simulate(brownian(1), [0.0], 0.1, 1.0, 10, 1, record_every=0.3)


def test_deterministic_across_worker_counts():
    # more than one group of blocks, so threads really split the work
    args = (brownian(2), [0.0, 0.0], 0.1, 0.5, 70_000, 11)
    a = S.simulate(*args, workers=1)
    b = S.simulate(*args, workers=3)
    assert np.array_equal(a.paths, b.paths)
    c = S.simulate(*args[:-1], 12)
    assert not np.array_equal(a.paths, c.paths)


# -- reflection ---------------------------------------------------------------------


def test_reflect_fixed_examples():
    assert S.reflect_fixed(np.array([[-0.3]]), half_line(0.0))[0, 0] == pytest.approx(0.3)
    assert S.reflect_fixed(np.array([[1.2]]), box([0.0], [1.0]))[0, 0] == pytest.approx(0.8)


@settings(max_examples=60, deadline=None)
@given(v=st.floats(-0.99, 1.99))
def test_reflect_fixed_box_property(v):
    out = S.reflect_fixed(np.array([[v]]), box([0.0], [1.0]))[0, 0]
    assert 0.0 <= out <= 1.0
    # within one box width of the domain a single mirror bounce suffices
    want = -v if v < 0 else (2.0 - v if v > 1 else v)
    assert out == pytest.approx(want, abs=1e-12)


def test_reflected_brownian_half_normal():
    ens = S.simulate(reflected_brownian(0.0), [0.0], 1e-2, 1.0, 100_000, 4, record_every=1.0)
    z = ens.at(1.0)[:, 0]
    assert z.min() >= 0
    assert kstest(z, halfnorm.cdf).statistic < 0.02


# -- reflected pair, interlacing ---------------------------------------------------------


def test_reflected_pair_gap_and_free_component():
    ens = S.simulate_reflected_pair(lambda r, m: np.zeros(m), 1e-2, 1.0, 100_000, 5, record_every=1.0)
    z = ens.at(1.0)
    gap = z[:, 1] - z[:, 0]
    assert gap.min() >= 0
    assert kstest(gap, halfnorm(scale=np.sqrt(2)).cdf).statistic < 0.02
    assert kstest(z[:, 0], norm.cdf).statistic < 0.02


def test_reflected_pair_mirrored():
    ens = S.simulate_reflected_pair(lambda r, m: -np.ones(m), 1e-2, 0.5, 2000, 6)
    assert np.all(ens.paths[:, :, 1] <= ens.paths[:, :, 0])


def test_interlaced_n1_is_brownian_motion():
    a = S.simulate_interlaced(1, 1e-2, 1.0, 5000, 7)
    b = S.simulate(brownian(1), [0.0], 1e-2, 1.0, 5000, 7)
    assert np.array_equal(a.paths, b.paths)


def test_interlacing_invariant():
    ens = S.simulate_interlaced(3, 1e-3, 0.2, 2000, 8)
    z = ens.paths
    l1, l2, l3 = z[..., 0:1], z[..., 1:3], z[..., 3:6]
    assert np.all(l2[..., :1] <= l1) and np.all(l1 <= l2[..., 1:])
    assert np.all(l3[..., :-1] <= l2) and np.all(l2 <= l3[..., 1:])
    assert ens.times[0] == pytest.approx(1e-2)


def test_interlaced_level1_uniform_between_level2():
    ens = S.simulate_interlaced(2, 1e-3, 0.5, 20_000, 9, record_every=0.49)
    z = ens.at(0.5)
    u = (z[:, 0] - z[:, 1]) / (z[:, 2] - z[:, 1])
    assert kstest(u, "uniform").statistic < 0.02


def test_interlaced_argument_errors():
    with pytest.raises(ValueError):
        S.simulate_interlaced(7, 1e-3, 1.0, 10, 1)
    with pytest.raises(ValueError):
        S.simulate_interlaced(2, 1e-3, 1.0, 10, 1, entrance="bogus")


# -- Whittaker ----------------------------------------------------------------------


def test_whittaker_no_clips_small_dt():
    ens = S.simulate_whittaker(2, [0.0, 0.0], 1e-4, 1.0, 1000, 10, init=[0.0, -1.0, 1.0], record_every=0.5)
    assert ens.meta["clipped"] == 0
    assert np.all(np.isfinite(ens.paths))


def test_whittaker_drift_spot_check():
    d = K._whittaker_dy(2, np.zeros(2), np.zeros((1, 2)), np.zeros((1, 1)))
    assert d[0, 1] == pytest.approx(-1.0)


def test_whittaker_clip_guard():
    with pytest.raises(S.SimulationError):
        S.simulate_whittaker(2, [0.0, 0.0], 0.5, 1.0, 200, 1, init=[0.0, -30.0, 30.0])


# -- ensemble files -------------------------------------------------------------------


def test_itwe_round_trip(tmp_path):
    ens = S.simulate(brownian(2), [0.0, 1.0], 0.1, 0.5, 300, 13)
    p = tmp_path / "e.itwe"
    ens.save(p)
    assert p.read_bytes()[:4] == b"ITWE"
    back = S.load_ensemble(p)
    assert np.array_equal(back.paths, ens.paths) and np.array_equal(back.times, ens.times)
    assert (back.seed, back.dt, back.x_dim) == (13, 0.1, 0)
    assert back.meta["scheme"] == "euler-maruyama"


def test_itwe_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.itwe"
    p.write_bytes(b"NOPE" + bytes(64))
    with pytest.raises(ValueError):
        S.load_ensemble(p)


def test_ensemble_csv(tmp_path):
    ens = S.simulate(brownian(1), [0.0], 0.1, 0.2, 5, 14)
    p = tmp_path / "e.csv"
    ens.to_csv(p, max_paths=3)
    lines = p.read_text().splitlines()
    assert lines[0] == "path,t,z0"
    assert len(lines) == 1 + 3 * len(ens.times)
