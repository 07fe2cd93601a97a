import dataclasses

import numpy as np
import pytest

from intertwine import scenarios as S
from intertwine.config import ConfigError


def small(name, **over):
    return dataclasses.replace(S.default_config(name), **over)


def test_registry():
    names = S.list_scenarios()
    assert len(names) == 13
    assert "cauchy-wave" in names and "rbm-rate" in names
    with pytest.raises(ConfigError):
        S.default_config("nope")


def test_undersampled_run_is_inconclusive():
    res = S.run_scenario(small("cauchy-wave", n_paths=10))
    assert res.exit_code == 2
    stat = [c for c in res.checks if c.check.startswith(("ks", "semigroup", "independence", "binned"))]
    assert stat and all(c.status == "inconclusive" for c in stat)
    # deterministic checks still pass
    assert all(c.passed for c in res.checks if c.check.startswith(("pde", "order")))


def test_small_cauchy_run_passes():
    res = S.run_scenario(small("cauchy-wave", n_paths=5000, dt=1e-2))
    assert res.exit_code == 0 and res.passed


def test_mutated_cauchy_fails_every_statistical_gate():
    res = S.run_scenario(small("cauchy-wave", n_paths=20_000, dt=1e-2, mutate=True))
    assert res.exit_code == 1
    stat = [c for c in res.checks if not c.check.startswith(("pde", "order", "positivity"))]
    assert stat and all(c.status == "fail" for c in stat)


@pytest.mark.parametrize("name", ["dixon-anderson", "gt-cone", "whittaker", "rbm-rate", "bm-reflect-pair"])
def test_mutation_not_applicable(name):
    with pytest.raises(ConfigError):
        S.run_scenario(small(name, mutate=True))


def test_config_validation():
    with pytest.raises(ConfigError):
        S.validate_config(small("cauchy-wave", kernel={"y0": 0.0, "bogus": 1}))
    with pytest.raises(ConfigError):
        S.validate_config(small("cauchy-wave", dt=0.3))


def test_rbm_plotdata_schema(tmp_path):
    res = S.run_scenario(small("rbm-rate", n_paths=2000, dt=1e-2, kernel={"p": [1], "times": [0.5]}))
    files = S.emit_plotdata(res, tmp_path)
    dat = tmp_path / "rbm-rate_p1.dat"
    assert str(dat) in files
    assert dat.read_text().splitlines()[0] == "# t oracle bound mc_survival"
    table = np.loadtxt(dat)
    assert table.shape[1] == 4
    assert np.all(table[:, 1] <= table[:, 2])
    header = (tmp_path / "rbm-rate_bound.csv").read_text().splitlines()[0]
    assert header == "p,t,oracle,mc_survival,se,closed_bound,pass,raw_bound"


def test_cauchy_overlay_and_checks_csv(tmp_path):
    res = S.run_scenario(small("cauchy-wave", n_paths=5000, dt=1e-2))
    S.emit_plotdata(res, tmp_path)
    overlay = np.loadtxt(tmp_path / "cauchy-wave_cdf.dat")
    assert overlay.shape[0] == 512
    lines = (tmp_path / "cauchy-wave_checks.csv").read_text().splitlines()
    assert lines[0] == "scenario,check,statistic,n,threshold,pass"
    assert len(lines) == 1 + len(res.checks)
    assert (tmp_path / "cauchy-wave_coupled.itwe").read_bytes()[:4] == b"ITWE"


def test_emitted_files_deterministic(tmp_path):
    cfg = small("pitman", n_paths=3000, dt=1e-2, kernel={"y0_coupled": 1.0, "coupled_paths": 2000})
    a, b = tmp_path / "a", tmp_path / "b"
    fa = S.emit_plotdata(S.run_scenario(cfg), a)
    fb = S.emit_plotdata(S.run_scenario(cfg), b)
    assert [p.split("/")[-1] for p in fa] == [p.split("/")[-1] for p in fb]
    for pa, pb in zip(fa, fb):
        assert open(pa, "rb").read() == open(pb, "rb").read(), pa


def test_simulation_failure_is_a_failed_check():
    # a huge step makes the exponential drifts blow up
    res = S.run_scenario(small("whittaker", dt=0.5, T=1.0, n_paths=200, kernel={"a": [0.0, 0.0], "y0": [-30.0, 30.0]}))
    sim = next(c for c in res.checks if c.check == "simulate:whittaker")
    assert sim.status == "fail" and "dt" in sim.note
    assert res.exit_code == 1


def test_module_errors_carry_scenario_name():
    with pytest.raises(S.ScenarioError, match="^whittaker: "):
        S.run_scenario(small("whittaker", n_paths=100, kernel={"a": [0.0, 0.0], "y0": [1.0, 2.0, 3.0]}))
