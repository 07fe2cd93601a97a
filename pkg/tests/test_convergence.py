import numpy as np
import pytest
from scipy.stats import norm

from intertwine import convergence as C
from intertwine.diffusion import brownian, brownian_drift


# -- hitting times --------------------------------------------------------------------


def test_bm_survival_mc():
    curve = C.hitting_time_mc(brownian(1), 1.0, 0.0, 1e-3, 1.0, 40_000, 3, times=[0.25, 1.0])
    want = 2 * norm.cdf(1.0) - 1
    assert curve.survival[-1] == pytest.approx(want, abs=3 * curve.se[-1])
    assert curve.reliable
    assert curve.survival[0] >= curve.survival[1]


def test_drifted_survival_matches_quadrature():
    curve = C.hitting_time_mc(brownian_drift([-1.0]), 1.0, 0.0, 1e-3, 1.0, 40_000, 4, times=[0.5, 1.0])
    for t, s, se in zip(curve.times, curve.survival, curve.se):
        assert s == pytest.approx(C.first_passage_survival(1.0, 1.0, t), abs=3 * se + 2e-3)


@pytest.mark.parametrize("kappa,y,t", [(0.0, 1.0, 1.0), (1.0, 1.0, 0.5), (0.5, 2.0, 3.0), (2.0, 0.3, 0.1)])
def test_closed_form_survival_vs_quadrature(kappa, y, t):
    assert float(C.survival_closed_form(kappa, y, t)) == pytest.approx(C.first_passage_survival(kappa, y, t), abs=1e-9)


def test_survival_vanishes_at_zero_start():
    assert C.first_passage_survival(1.0, 0.0, 1.0) == 0.0
    assert float(C.survival_closed_form(0.0, 1e-8, 1.0)) < 1e-7


def test_hitting_time_argument_errors():
    with pytest.raises(ValueError):
        C.hitting_time_mc(brownian(2), 1.0, 0.0, 1e-2, 1.0, 10, 1)
    with pytest.raises(ValueError):
        C.hitting_time_mc(brownian(1), -1.0, 0.0, 1e-2, 1.0, 10, 1)


# -- closed bound ----------------------------------------------------------------------


def test_bm_drift_bound_values():
    assert float(C.bm_drift_bound(0.0, 0.5, 1.0)) == pytest.approx(0.5 * np.sqrt(2 / np.pi), abs=1e-12)
    assert float(C.bm_drift_bound(0.0, 0.5, 1.0)) == pytest.approx(0.39894, abs=1e-5)
    want = np.e * np.sqrt(2 / (4 * np.pi)) * np.exp(-2.0)
    assert float(C.bm_drift_bound(1.0, 1.0, 4.0)) == pytest.approx(want, rel=1e-12)
    with pytest.raises(ValueError):
        C.bm_drift_bound(-1.0, 1.0, 1.0)
    with pytest.raises(ValueError):
        C.bm_drift_bound(0.0, 1.0, 0.0)


def test_bm_drift_bound_monotone_and_dominates():
    t = np.linspace(0.1, 10, 50)
    for kappa in (0.0, 0.5, 2.0):
        b = C.bm_drift_bound(kappa, 1.0, t)
        assert np.all(np.diff(b) < 0)
        assert np.all(b >= C.survival_closed_form(kappa, 1.0, t))


# -- reflected Brownian motion -----------------------------------------------------------


def test_rbm_example_link():
    link = C.rbm_example_link(1)
    x = np.linspace(0, 1, 11)[:, None]
    assert np.allclose(link.density(np.full_like(x, 0.5), x), 1 + np.cos(np.pi * x[:, 0]))
    assert np.allclose(link.density(np.zeros_like(x), x), 1.0)
    ys = np.linspace(0, 1, 21)
    Y, X = np.meshgrid(ys, ys, indexing="ij")
    assert link.density(Y.reshape(-1, 1), X.reshape(-1, 1)).min() >= 0
    with pytest.raises(ValueError):
        C.rbm_example_link(0)


def test_rbm_oracle_values():
    assert C.rbm_separation_oracle(1, 1.0) == pytest.approx(np.exp(-np.pi ** 2 / 2), rel=1e-6)
    assert C.rbm_separation_oracle(1, 1.0) == pytest.approx(0.007192, abs=5e-7)
    assert C.rbm_separation_oracle(2, 0.1) == pytest.approx(0.1389, abs=5e-5)
    small = C.rbm_separation_oracle(1, 1e-3)
    assert 0.99 < small <= 1.0


def test_rbm_curve_decreasing():
    curve = C.rbm_separation_curve(2, [0.02, 0.05, 0.1, 0.3])
    assert np.all(np.diff(curve.values) < 0)


def test_rbm_density_sampler_matches_exact_bins():
    counts, probs = C.rbm_density_mc(1, 0.1, 100_000, 5, bins=32)
    assert probs.sum() == pytest.approx(1.0, abs=1e-12)
    exp = probs * counts.sum()
    chi2 = np.sum((counts - exp) ** 2 / exp)
    assert chi2 < 60  # 31 degrees of freedom, 0.1% level is about 61


def test_empirical_separation_of_exact_samples():
    rng = np.random.default_rng(0)
    u = rng.random(200_000)
    sep = C.empirical_separation(u, lambda x: np.ones_like(x), 0.0, 1.0, bins=32)
    assert sep < 0.03
    half = u[u < 0.5]
    assert C.empirical_separation(half, lambda x: np.ones_like(x), 0.0, 1.0, bins=32) == pytest.approx(1.0)


@pytest.fixture(scope="module")
def rbm_rows():
    return C.verify_rbm_bound(1, [0.05, 1.0], n_paths=20_000, dt=1e-3, seed=7)


def test_verify_rbm_bound_p1(rbm_rows):
    early, late = rbm_rows
    assert set(early) >= {"p", "t", "oracle", "mc_survival", "se", "closed_bound", "pass"}
    assert late["oracle"] == pytest.approx(0.00719, abs=1e-5)
    assert late["closed_bound"] == pytest.approx(0.39894, abs=1e-5)
    assert early["closed_bound"] == 1.0 and early["raw_bound"] > 1.0
    assert early["oracle"] == pytest.approx(0.7814, abs=5e-4)
    assert early["pass"] and late["pass"]


def test_verify_rbm_bound_p3():
    (row,) = C.verify_rbm_bound(3, [0.2], n_paths=20_000, seed=8)
    assert row["oracle"] == pytest.approx(1.4e-4, rel=0.05)
    assert row["closed_bound"] == pytest.approx(0.297, abs=1e-3)
    assert row["pass"]


def test_verify_rbm_bound_seed_stability(rbm_rows):
    other = C.verify_rbm_bound(1, [0.05, 1.0], n_paths=20_000, dt=1e-3, seed=70)
    for a, b in zip(rbm_rows, other):
        pooled = np.hypot(a["se"], b["se"])
        assert abs(a["mc_survival"] - b["mc_survival"]) <= 3 * pooled + 1e-12


def test_rbm_table_csv(rbm_rows, tmp_path):
    import csv

    p = tmp_path / "rbm.csv"
    C.write_rbm_table(rbm_rows, p)
    with open(p) as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == C.RBM_CSV_COLUMNS
    assert C.RBM_CSV_COLUMNS[:7] == ("p", "t", "oracle", "mc_survival", "se", "closed_bound", "pass")
    assert [float(r["oracle"]) for r in rows] == [r["oracle"] for r in rbm_rows]
    assert rows[0]["pass"] == "true" and float(rows[0]["raw_bound"]) > 1.0
