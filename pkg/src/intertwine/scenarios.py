"""Scenario registry: kernel -> residual checks -> simulation -> statistical gates.

Each scenario has fixed default parameters and seed.  ``run_scenario``
returns a :class:`ScenarioResult` whose exit code follows the contract
0 pass, 1 failure, 2 inconclusive.  ``emit_plotdata`` writes the check table
as CSV and curves as whitespace-separated ``.dat`` files.
"""
from __future__ import annotations

import csv
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats as sps
from scipy.special import erf

from . import algebra, convergence, kernels, verify
from .config import ConfigError, ScenarioConfig
from .diffusion import (
    DiffusionSpec,
    bessel,
    brownian,
    circle_brownian,
    jacobi,
    reflected_brownian,
    squared_bessel,
)
from .domains import weyl_chamber
from .rng import RngStreams
from .sde import (
    PathEnsemble,
    SimulationError,
    build_system,
    pitman_2m_minus_b,
    simulate,
    simulate_interlaced,
    simulate_reflected_pair,
    simulate_whittaker,
)
from .stats import (
    GofReport,
    InconclusiveError,
    chi2_test,
    conditional_link_check,
    independence_check,
    ks_statistic,
    marginal_check,
    semigroup_check,
)

__all__ = [
    "CheckResult",
    "ScenarioError",
    "ScenarioResult",
    "default_config",
    "emit_plotdata",
    "list_scenarios",
    "run_scenario",
    "validate_config",
]

CSV_COLUMNS = ("scenario", "check", "statistic", "n", "threshold", "pass")


class ScenarioError(RuntimeError):
    """A module error raised while running a scenario, tagged with its name."""


@dataclass(frozen=True)
class CheckResult:
    check: str
    status: str
    statistic: float
    n: int
    threshold: float
    report: object = None
    mandatory: bool = True
    note: str = ""

    @property
    def passed(self) -> bool:
        return self.status == "pass"

    def row(self, scenario: str) -> dict:
        return {"scenario": scenario, "check": self.check, "statistic": _fmt(self.statistic), "n": self.n,
                "threshold": _fmt(self.threshold), "pass": {"pass": "true", "fail": "false"}.get(self.status, self.status)}


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    checks: list[CheckResult]
    wall_time: float
    plotdata: dict = field(default_factory=dict)
    ensembles: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)

    @property
    def mandatory(self) -> list[CheckResult]:
        return [c for c in self.checks if c.mandatory]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.mandatory)

    @property
    def inconclusive(self) -> bool:
        return any(c.status == "inconclusive" for c in self.mandatory)

    @property
    def exit_code(self) -> int:
        if self.passed:
            return 0
        if any(c.status == "fail" for c in self.mandatory):
            return 1
        return 2

    def rows(self) -> list[dict]:
        return [c.row(self.config.scenario) for c in self.checks]


def _fmt(v) -> str:
    return repr(float(v)) if v is not None else "nan"


# -- bookkeeping -----------------------------------------------------------------


class _Run:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg
        self.checks: list[CheckResult] = []
        self.plotdata: dict = {}
        self.ensembles: dict = {}
        self.tables: dict = {}

    @property
    def alpha(self) -> float:
        return float(self.cfg.checks.get("alpha", 0.01))

    @property
    def ks_threshold(self):
        v = self.cfg.checks.get("ks_threshold")
        return None if v is None else float(v)

    def add(self, name: str, rep, mandatory: bool = True, note: str = "") -> None:
        if isinstance(rep, GofReport):
            c = CheckResult(name, "pass" if rep.passed else "fail", rep.statistic, rep.n, rep.threshold, rep,
                            mandatory, note)
        elif isinstance(rep, verify.ResidualReport):
            c = CheckResult(name, "pass" if rep.passed else "fail", rep.max_abs, rep.n_points, rep.tol, rep,
                            mandatory, note)
        else:
            raise TypeError(f"unexpected report type {type(rep).__name__}")
        self.checks.append(c)

    def gate(self, name: str, fn: Callable, mandatory: bool = True, needs=()) -> object:
        if any(n is None for n in needs):
            self.checks.append(CheckResult(name, "fail", math.nan, 0, math.nan, None, mandatory, "simulation failed"))
            return None
        try:
            rep = fn()
        except InconclusiveError as exc:
            self.checks.append(CheckResult(name, "inconclusive", math.nan, 0, math.nan, None, mandatory, str(exc)))
            return None
        self.add(name, rep, mandatory)
        return rep

    def flag(self, name: str, ok: bool, statistic: float, threshold: float, n: int = 1, mandatory: bool = True,
             note: str = "") -> None:
        self.checks.append(CheckResult(name, "pass" if ok else "fail", float(statistic), n, float(threshold), None,
                                       mandatory, note))

    def simulate(self, name: str, fn: Callable) -> PathEnsemble | None:
        try:
            ens = fn()
        except SimulationError as exc:
            self.checks.append(CheckResult(f"simulate:{name}", "fail", math.nan, 0, math.nan, None, True, str(exc)))
            return None
        self.ensembles[name] = ens
        return ens


def _uniform_cdf(u):
    return np.clip(u, 0.0, 1.0)


def _normal_cdf(t: float, mean: float = 0.0):
    return lambda x: sps.norm.cdf((x - mean) / math.sqrt(t))


def _bessel3_cdf(a: float, t: float):
    """Law of a 3-dimensional Bessel process at time ``t`` from ``a``."""
    s = math.sqrt(t)
    if a == 0:
        return sps.chi(3, scale=s).cdf

    def cdf(y):
        y = np.asarray(y, dtype=float)
        return (sps.norm.cdf((y - a) / s) + sps.norm.cdf((y + a) / s) - 1.0
                - (t / a) * (sps.norm.pdf((y - a) / s) - sps.norm.pdf((y + a) / s)) / s)

    return cdf


def _wrapped_normal_cdf(x0: float, t: float, period: float, terms: int = 8):
    """CDF on ``[0, period)`` of ``x0 + B(t)`` reduced mod ``period``."""
    s = math.sqrt(t)

    def cdf(x):
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        for k in range(-terms, terms + 1):
            out += sps.norm.cdf((x - x0 + k * period) / s) - sps.norm.cdf((-x0 + k * period) / s)
        return out

    return cdf


def _ones(x):
    return np.ones(np.shape(x)[:-1])


def _arcsine(y):
    """Invariant density of ``cos`` of a uniform angle on ``(-1, 1)``."""
    y = np.asarray(y, dtype=float)[..., 0]
    return 1.0 / (np.pi * np.sqrt(np.maximum(1.0 - y * y, 1e-300)))


def _suite_entry(name: str) -> verify.SuiteEntry:
    for e in verify.default_suite():
        if e.name == name:
            return e
    raise KeyError(name)


def _residual(run: _Run, entry: verify.SuiteEntry, order: bool = False) -> None:
    run.add(f"pde:{entry.name}", verify.pde_residual(entry.link, entry.specX, entry.specY, entry.grid, entry.tol))
    if order:
        ok, r1, r2, ratio = verify.order_check(entry.link, entry.specX, entry.specY, entry.order_grid or entry.grid,
                                               entry.order_h)
        run.flag(f"order:{entry.name}", ok, ratio, 3.5, note=f"r(h)={r1:.3g} r(h/2)={r2:.3g}")


def _cdf_overlay(sample, reference: Callable, lo: float, hi: float, rows: int = 512):
    x = np.linspace(lo, hi, rows)
    s = np.sort(np.asarray(sample))
    emp = np.searchsorted(s, x, side="right") / len(s)
    return ("x", "empirical", "reference"), np.column_stack([x, emp, reference(x)])


# -- scenarios ------------------------------------------------------------------


def _cauchy_wave(run: _Run) -> None:
    cfg = run.cfg
    link = kernels.cauchy_kernel()
    _residual(run, _suite_entry("cauchy"), order=True)
    run.add("positivity_mass", verify.positivity_and_mass(link, [[-1.0], [0.0], [2.0]], mass_tol=1e-4))
    system = build_system(brownian(1), brownian(1), link, mutate=cfg.mutate)
    y0 = float(cfg.kernel["y0"])
    # record at T/4 when that is on the step grid so both check times are available
    quarter = cfg.T / 4
    record = quarter if abs(round(quarter / cfg.dt) * cfg.dt - quarter) < 1e-12 * cfg.T else cfg.T
    times = sorted({quarter, cfg.T}) if record == quarter else [cfg.T]
    ens = run.simulate("coupled", lambda: simulate(system, system.initial_sampler(y0), cfg.dt, cfg.T, cfg.n_paths,
                                                   cfg.seed, record_every=record, workers=cfg.workers))
    cauchy_cdf = lambda u: 0.5 + np.arctan(u) / np.pi
    pivot = lambda x, y: (x - y)[:, 0]
    for t in times:
        run.gate(f"ks:Z2({t:g})~N(y0,t)", lambda: marginal_check(ens, "y", t, _normal_cdf(t, y0), run.alpha,
                                                                  run.ks_threshold), needs=[ens])
        run.gate(f"ks:Z1({t:g})-Z2({t:g})~Cauchy", lambda: conditional_link_check(
            ens, t, pivot=pivot, reference_cdf=cauchy_cdf, alpha=run.alpha, threshold=run.ks_threshold), needs=[ens])
    T = times[-1]
    run.gate("binned-pit", lambda: conditional_link_check(ens, T, link, n_bins=10, alpha=run.alpha), needs=[ens])
    run.gate("independence", lambda: independence_check(ens, T, lambda x, y: ((x - y)[:, 0], y[:, 0]), "spearman"),
             needs=[ens])
    run.gate("semigroup", lambda: semigroup_check(system, lambda x: 1.0 / (1.0 + x * x), T, y0, cfg.n_paths,
                                                  cfg.seed, cfg.dt, ensemble=ens), needs=[ens])
    if ens is not None:
        z = ens.at(T)
        run.plotdata["cdf"] = _cdf_overlay(z[:, 0] - z[:, 1], cauchy_cdf, -10.0, 10.0)


def _beta_gamma(run: _Run) -> None:
    cfg = run.cfg
    a, b, y0 = float(cfg.kernel["alpha"]), float(cfg.kernel["beta"]), float(cfg.kernel["y0"])
    link = kernels.beta_gamma_kernel(a, b)
    run.add("identity", verify.beta_gamma_identity(a, b))
    entry = verify.SuiteEntry("beta_gamma", link, squared_bessel(2 * a), squared_bessel(2 * (a + b)),
                              verify.GridSpec(((0.1, 5), (0.1, 5)), (50, 50), h=2e-5), 1e-3)
    _residual(run, entry)
    system = build_system(entry.specX, entry.specY, link, mutate=cfg.mutate)
    T = cfg.T
    ens = run.simulate("coupled", lambda: simulate(system, system.initial_sampler(y0), cfg.dt, T, cfg.n_paths,
                                                   cfg.seed, record_every=T, workers=cfg.workers))
    y_cdf = lambda y: sps.ncx2.cdf(y / T, 2 * (a + b), y0 / T)
    run.gate("ks:Y~BESQ", lambda: marginal_check(ens, "y", T, y_cdf, run.alpha, run.ks_threshold), needs=[ens])
    ratio = lambda x, y: (x / y)[:, 0]
    run.gate("ks:X/Y~Beta", lambda: conditional_link_check(ens, T, pivot=ratio, reference_cdf=sps.beta(a, b).cdf,
                                                           alpha=run.alpha, threshold=run.ks_threshold), needs=[ens])
    run.gate("independence", lambda: independence_check(ens, T, lambda x, y: ((x / y)[:, 0], y[:, 0]), "pearson"),
             needs=[ens])
    run.gate("semigroup", lambda: semigroup_check(system, lambda x: np.minimum(x, 5.0), T, y0, cfg.n_paths, cfg.seed,
                                                  cfg.dt, ensemble=ens), needs=[ens])
    if ens is not None:
        z = ens.at(T)
        run.plotdata["cdf"] = _cdf_overlay(z[:, 0] / z[:, 1], sps.beta(a, b).cdf, 0.0, 1.0)


def _pitman(run: _Run) -> None:
    cfg = run.cfg
    T = cfg.T
    e = _suite_entry("pitman")
    _residual(run, e)
    for face in verify.pitman_faces():
        run.add(f"face:{face.name}", verify.moving_boundary_residual(e.link, e.specX, e.specY, face))
    nk = algebra.normalize(kernels.pitman_indicator())
    run.add("harmonic:tau=y", verify.harmonicity_check(nk.tau, brownian(1),
                                                        verify.GridSpec(((0.2, 5.0),), (32,), h=1e-3)))
    ratio = lambda x, y: (x / y)[:, 0]
    if not cfg.mutate:
        # drift-free representation, exact at grid times
        rep = run.simulate("2m-b", lambda: pitman_2m_minus_b(cfg.dt, T, cfg.n_paths, cfg.seed, record_every=T,
                                                            workers=cfg.workers))
        run.gate("ks:X/Y~U(0,1)", lambda: conditional_link_check(rep, T, pivot=ratio, reference_cdf=_uniform_cdf,
                                                                  alpha=run.alpha, threshold=run.ks_threshold),
                 needs=[rep])
        run.gate("independence", lambda: independence_check(rep, T, lambda x, y: ((x / y)[:, 0], y[:, 0]), "pearson"),
                 needs=[rep])
        run.gate("ks:Y~Bessel3(0)", lambda: marginal_check(rep, "y", T, _bessel3_cdf(0.0, T), run.alpha,
                                                            run.ks_threshold), needs=[rep])
        if rep is not None:
            z = rep.at(T)
            run.plotdata["cdf"] = _cdf_overlay(z[:, 0] / z[:, 1], _uniform_cdf, 0.0, 1.0)
    # Euler realization of the coupled system; the only one the drift mutation can act on
    y0 = float(cfg.kernel["y0_coupled"])
    m = min(cfg.n_paths, int(cfg.kernel["coupled_paths"]))
    system = build_system(reflected_brownian(0.0), bessel(3.0), kernels.pitman_kernel(), mutate=cfg.mutate)
    ens = run.simulate("coupled", lambda: simulate(system, system.initial_sampler(y0), cfg.dt, T, m, cfg.seed + 1,
                                                   record_every=T, workers=cfg.workers))
    run.gate("coupled:ks:X/Y~U(0,1)", lambda: conditional_link_check(ens, T, pivot=ratio, reference_cdf=_uniform_cdf,
                                                                     alpha=run.alpha), needs=[ens])
    run.gate("coupled:ks:Y~Bessel3(y0)", lambda: marginal_check(ens, "y", T, _bessel3_cdf(y0, T), run.alpha),
             needs=[ens])
    run.gate("coupled:semigroup", lambda: semigroup_check(system, lambda x: x, T, y0, m, cfg.seed, cfg.dt,
                                                          ensemble=ens), needs=[ens])


def _da2_rosenblatt(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Map interlaced ``(x1, x2)`` given ``y1 < y2 < y3`` to two iid uniforms."""
    y1, y2, y3 = y[:, 0], y[:, 1], y[:, 2]
    x1, x2 = x[:, 0], x[:, 1]
    vdm = (y2 - y1) * (y3 - y1) * (y3 - y2)
    u1 = (y3 - y2) * ((y3 + y2) * (x1 - y1) - (x1**2 - y1**2)) / vdm
    u2 = ((x2 - x1) ** 2 - (y2 - x1) ** 2) / ((y3 - x1) ** 2 - (y2 - x1) ** 2)
    return u1, u2


def _dixon_anderson(run: _Run) -> None:
    cfg = run.cfg
    for M in (1, 2):
        e = _suite_entry(f"dixon_anderson({M})")
        _residual(run, e)
        for face in verify.dixon_anderson_faces(M):
            run.add(f"face:{face.name}", verify.moving_boundary_residual(e.link, e.specX, e.specY, face))
    run.add("positivity_mass(2)", verify.positivity_and_mass(kernels.dixon_anderson_kernel(2),
                                                             [[-1.0, 0.2, 1.5], [-0.3, 0.0, 0.4]], n=48,
                                                             mass_tol=1e-4))
    T = cfg.T
    ens = run.simulate("interlaced", lambda: simulate_interlaced(3, cfg.dt, T, cfg.n_paths, cfg.seed,
                                                                 record_every=T - 1e-2, workers=cfg.workers))
    lv1, lv2, lv3 = slice(0, 1), slice(1, 3), slice(3, 6)

    def levels(x, y):
        z = np.concatenate([x, y], axis=1)
        return z[:, lv1], z[:, lv2], z[:, lv3]

    def pit2(x, y):
        _, l2, l3 = levels(x, y)
        return _da2_rosenblatt(l2, l3)

    def pit1(x, y):
        l1, l2, _ = levels(x, y)
        return ((l1[:, 0] - l2[:, 0]) / (l2[:, 1] - l2[:, 0]))

    run.gate("ks:level2|level3:u1", lambda: conditional_link_check(
        ens, T, pivot=lambda x, y: pit2(x, y)[0], reference_cdf=_uniform_cdf, alpha=run.alpha), needs=[ens])
    run.gate("ks:level2|level3:u2", lambda: conditional_link_check(
        ens, T, pivot=lambda x, y: pit2(x, y)[1], reference_cdf=_uniform_cdf, alpha=run.alpha), needs=[ens])
    run.gate("independence:u1,u2", lambda: independence_check(ens, T, pit2, "pearson"), needs=[ens])
    run.gate("independence:u1,gap3", lambda: independence_check(
        ens, T, lambda x, y: (pit2(x, y)[0], levels(x, y)[2][:, 2] - levels(x, y)[2][:, 0]), "spearman"), needs=[ens])
    run.gate("ks:level1|level2", lambda: conditional_link_check(ens, T, pivot=pit1, reference_cdf=_uniform_cdf,
                                                                alpha=run.alpha), needs=[ens])


def _gue2_cells(y: np.ndarray, t: float, k: int = 8) -> np.ndarray:
    """8 x 8 contingency counts of the GUE-2 centre and gap at equal-probability cells."""
    c = 0.5 * (y[:, 0] + y[:, 1])
    g = y[:, 1] - y[:, 0]
    uc = sps.norm.cdf(c / math.sqrt(t / 2.0))
    ug = sps.chi(3).cdf(g / math.sqrt(2.0 * t))
    ic = np.minimum((uc * k).astype(int), k - 1)
    ig = np.minimum((ug * k).astype(int), k - 1)
    return np.bincount(ic * k + ig, minlength=k * k)


def _gt_cone(run: _Run) -> None:
    cfg = run.cfg
    T = cfg.T
    ens = run.simulate("interlaced", lambda: simulate_interlaced(2, cfg.dt, T, cfg.n_paths, cfg.seed,
                                                                 record_every=T - 1e-2, workers=cfg.workers))
    if ens is not None:
        z = ens.at(T)
        viol = int(np.sum((z[:, 0] < z[:, 1]) | (z[:, 0] > z[:, 2])))
        run.flag("interlacing", viol == 0, viol, 0, len(z))
    cells = int(cfg.checks.get("cells", 64))
    k = int(round(math.sqrt(cells)))
    if k * k != cells:
        raise ConfigError("check.cells must be a perfect square")
    run.gate("chi2:level2~GUE2", lambda: chi2_test(_gue2_cells(ens.at(T)[:, 1:], T, k),
                                                   np.full(cells, len(ens.paths) / cells), run.alpha), needs=[ens])
    da1 = kernels.dixon_anderson_kernel(1)

    def pit():
        z = ens.at(T)
        u = da1.cdf(z[:, 1:], z[:, :1])
        return _binned_pit_ks(u, z[:, 2] - z[:, 1], 10, run.alpha, int(cfg.checks.get("min_per_bin", 500)))

    run.gate("binned-pit:level1|level2", pit, needs=[ens])


def _binned_pit_ks(u: np.ndarray, key: np.ndarray, n_bins: int, alpha: float, min_per_bin: int) -> GofReport:
    """Worst per-bin KS of PIT values against U(0,1), bins of equal count in ``key``, level ``alpha / n_bins``."""
    if len(u) // n_bins < min_per_bin:
        raise InconclusiveError(f"{len(u)} paths give fewer than {min_per_bin} per bin")
    order = np.argsort(key, kind="stable")
    worst = None
    for idx in np.array_split(order, n_bins):
        rep = ks_statistic(np.sort(u[idx]), _uniform_cdf, alpha / n_bins)
        if worst is None or rep.statistic / rep.threshold > worst.statistic / worst.threshold:
            worst = rep
    return GofReport("ks", worst.statistic, len(u), worst.threshold, worst.passed, {"method": "binned-pit",
                                                                                   "bins": n_bins})


def _as_xy(ens: PathEnsemble, x_dim: int) -> PathEnsemble:
    return PathEnsemble(ens.times, ens.paths, ens.seed, ens.dt, x_dim, dict(ens.meta))


def _binned_pit_chi2(u: np.ndarray, key: np.ndarray, rows: int, cols: int, alpha: float) -> GofReport:
    """Chi-square of the PIT histogram across equal-count bins of ``key``."""
    if len(u) < rows * cols * 20:
        raise InconclusiveError(f"{len(u)} samples are too few for {rows}x{cols} cells")
    order = np.argsort(key, kind="stable")
    stat, df = 0.0, 0
    for idx in np.array_split(order, rows):
        counts = np.bincount(np.minimum((np.clip(u[idx], 0, 1) * cols).astype(int), cols - 1), minlength=cols)
        exp = len(idx) / cols
        stat += float(np.sum((counts - exp) ** 2 / exp))
        df += cols - 1
    p = float(sps.chi2.sf(stat, df))
    return GofReport("chi2", stat, len(u), alpha, p >= alpha, {"df": df, "rows": rows, "cols": cols}, p)


def _whittaker(run: _Run) -> None:
    cfg = run.cfg
    a = np.asarray(cfg.kernel["a"], dtype=float)
    if a.shape != (2,):
        raise ConfigError("kernel.a must have two entries")
    y0 = np.asarray(cfg.kernel["y0"], dtype=float)
    link = kernels.whittaker_link(2, a)
    sx, sy = kernels.whittaker_specs(2, a)
    run.add("pde", verify.pde_residual(link, sx, sy, verify.GridSpec(((-1, 1), (-1, 1), (-1.5, 1.5)), (8, 8, 8),
                                                                     h=1e-3), 1e-4))
    # level-2 drift at R1 = 0, R2 = (0, 0): the second coordinate is a_2 - e^0
    d = float(kernels._whittaker_dy(2, a, np.zeros((1, 2)), np.zeros((1, 1)))[0, 1])
    run.flag("drift-spot-check", abs(d - (a[1] - 1.0)) <= 1e-12, d, a[1] - 1.0)
    T = cfg.T
    draw = kernels.sampler_for(link)

    def init(rng, m):
        y = np.broadcast_to(y0, (m, 2))
        return np.concatenate([draw.draw(y, rng), y], axis=1)

    ens = run.simulate("whittaker", lambda: simulate_whittaker(2, a, cfg.dt, T, cfg.n_paths, cfg.seed, init=init,
                                                               record_every=T, workers=cfg.workers))
    if ens is not None:
        run.flag("drift-clips", ens.meta.get("clipped", 0) == 0, ens.meta.get("clipped", 0), 0, cfg.n_paths)

    def pit():
        z = ens.at(T)
        y = z[:, 1:]
        u = kernels.conditional_cdf(link, y, z[:, :1])
        return _binned_pit_chi2(u, y[:, 1] - y[:, 0], 10, 10, run.alpha)

    run.gate("chi2:level1|level2", pit, needs=[ens])


def _chebyshev_torus(run: _Run) -> None:
    cfg = run.cfg
    coeffs = {int(k): float(v) for k, v in dict(cfg.kernel["coeffs"]).items()}
    link = kernels.chebyshev_torus_kernel(coeffs)
    run.add("pde", verify.pde_residual(link, circle_brownian(2 * np.pi), jacobi(),
                                       verify.GridSpec(((-0.9, 0.9), (0.0, 2 * np.pi)), (16, 16), h=1e-3), 1e-4))
    run.add("positivity_mass", verify.positivity_and_mass(link, [[-0.9], [0.0], [0.7]], mass_tol=1e-4))
    # Euler is only O(sqrt(dt)) for Jacobi near +-1, so simulate y = cos(theta) with theta a reflected BM
    theta0 = float(cfg.kernel["theta0"])
    if not 0.0 <= theta0 <= math.pi:
        raise ConfigError("kernel.theta0 must lie in [0, pi]")
    angular = kernels.reparametrize_y(link, np.cos, lambda th: -np.sin(th))
    system = build_system(circle_brownian(2 * np.pi), reflected_brownian(0.0, math.pi), angular, mutate=cfg.mutate)
    T = cfg.T
    ens = run.simulate("coupled", lambda: simulate(system, system.initial_sampler(theta0), cfg.dt, T, cfg.n_paths,
                                                   cfg.seed, record_every=T, workers=cfg.workers))
    wn = _wrapped_normal_cdf(theta0, T, 2 * np.pi)

    def y_cdf(y):
        ac = np.arccos(np.clip(y, -1.0, 1.0))
        return wn(2 * np.pi - ac) - wn(ac)

    run.gate("ks:Y~cos(theta0+B)", lambda: marginal_check(ens, lambda x, th: np.cos(th[:, 0]), T, y_cdf, run.alpha,
                                                          run.ks_threshold), needs=[ens])
    run.gate("binned-pit", lambda: conditional_link_check(ens, T, angular, n_bins=10, alpha=run.alpha), needs=[ens])
    run.gate("semigroup", lambda: semigroup_check(system, np.cos, T, theta0, cfg.n_paths, cfg.seed, cfg.dt,
                                                  ensemble=ens), needs=[ens])


def _torus_wave(run: _Run) -> None:
    cfg = run.cfg
    M = float(cfg.kernel["M"])
    k = 2.0 * np.pi
    link = kernels.torus_wave_kernel(lambda u: np.cos(k * u), lambda u: -k * np.sin(k * u), M, 0.0, period=1.0)
    run.add("pde", verify.pde_residual(link, circle_brownian(1.0), circle_brownian(1.0),
                                       verify.GridSpec(((0.0, 1.0), (0.0, 1.0)), (16, 16), h=1e-3), 1e-4))
    run.add("positivity_mass", verify.positivity_and_mass(link, [[0.1], [0.6]], mass_tol=1e-6))
    pair = algebra.InvariantDensityPair(_ones, _ones, (0.0, 1.0), (0.0, 1.0))
    dl = algebra.dual(link, pair)
    g = np.linspace(0.0, 1.0, 17)[:-1]
    X, Y = np.meshgrid(g, g, indexing="ij")
    xs, ys = X.reshape(-1, 1), Y.reshape(-1, 1)
    # the kernel depends on y - x through an even function, so it is its own dual
    diff = np.abs(dl.density(xs, ys) - link.density(xs, ys))
    run.flag("dual:self-dual", float(diff.max()) <= 1e-12, float(diff.max()), 1e-12, len(xs))
    y0 = float(cfg.kernel["y0"])
    system = build_system(circle_brownian(1.0), circle_brownian(1.0), link, mutate=cfg.mutate)
    T = cfg.T
    ens = run.simulate("coupled", lambda: simulate(system, system.initial_sampler(y0), cfg.dt, T, cfg.n_paths,
                                                   cfg.seed, record_every=T, workers=cfg.workers))
    run.gate("ks:Y~wrapped-normal", lambda: marginal_check(ens, "y", T, _wrapped_normal_cdf(y0, T, 1.0), run.alpha,
                                                           run.ks_threshold), needs=[ens])
    lag = lambda x, y: np.mod(y - x, 1.0)[:, 0]
    lag_cdf = lambda d: d + np.sin(k * d) / (k * M)
    run.gate("ks:(Y-X)~link", lambda: conditional_link_check(ens, T, pivot=lag, reference_cdf=lag_cdf,
                                                             alpha=run.alpha, threshold=run.ks_threshold), needs=[ens])
    run.gate("independence", lambda: independence_check(
        ens, T, lambda x, y: (np.cos(k * lag(x, y)), np.cos(k * y[:, 0])), "pearson"), needs=[ens])
    # centred at y0 so the mean has not decayed away at the default horizon
    run.gate("semigroup", lambda: semigroup_check(system, lambda x: np.cos(k * (x - y0)), T, y0, cfg.n_paths,
                                                  cfg.seed, cfg.dt, ensemble=ens), needs=[ens])


def _spherical_link():
    u, draw = kernels.gaussian_density(3)
    return kernels.spherical_mean_kernel(u, 3, draw)


def _spherical_mean(run: _Run) -> None:
    cfg = run.cfg
    link = _spherical_link()
    _residual(run, _suite_entry("spherical_mean(m=3)"))
    u, _ = kernels.gaussian_density(3)
    coarse = kernels.spherical_mean_kernel(u, 3, n_theta=8, n_phi=16)
    nk = algebra.normalize(link, bessel(3.0), mass_link=coarse)
    r = np.linspace(0.3, 2.0, 8)
    tau = nk.tau(r[:, None])
    a, b, res = algebra.fit_conservation(r, tau, 3)
    run.flag("conservation:a+b/r", res < 1e-4, res, 1e-4, len(r), note=f"a={a:.6g} b={b:.3g}")
    run.add("harmonic:tau", verify.harmonicity_check(nk.tau, bessel(3.0),
                                                      verify.GridSpec(((0.3, 2.0),), (8,), h=1e-3)))
    y0 = float(cfg.kernel["y0"])
    system = build_system(brownian(3), bessel(3.0), link, mutate=cfg.mutate)
    T = cfg.T
    ens = run.simulate("coupled", lambda: simulate(system, system.initial_sampler(y0), cfg.dt, T, cfg.n_paths,
                                                   cfg.seed, record_every=T, workers=cfg.workers))
    run.gate("ks:Y~Bessel3(y0)", lambda: marginal_check(ens, "y", T, _bessel3_cdf(y0, T), run.alpha,
                                                        run.ks_threshold), needs=[ens])
    # |X|^2 given Y = r is noncentral chi-square(3, r^2) because X = W - r theta
    pit = lambda x, y: sps.ncx2.cdf(np.sum(x * x, axis=1), 3, y[:, 0] ** 2)
    run.gate("ks:|X|^2|Y~ncx2", lambda: conditional_link_check(ens, T, pivot=pit, reference_cdf=_uniform_cdf,
                                                               alpha=run.alpha, threshold=run.ks_threshold),
             needs=[ens])
    run.gate("independence", lambda: independence_check(ens, T, lambda x, y: (pit(x, y), y[:, 0]), "spearman"),
             needs=[ens])

    def semigroup():
        z = ens.at(T)
        # L|x|^2 (y) = 3 + y^2 in closed form; the paired difference tests Q_t L f = L P_t f
        q = 3.0 + z[:, 3] ** 2
        p = np.sum(z[:, :3] ** 2, axis=1)
        d = q - p
        if len(d) < 100:
            raise InconclusiveError("semigroup check needs at least 100 paths")
        se = float(np.std(d, ddof=1) / math.sqrt(len(d)))
        delta = abs(float(d.mean()))
        return GofReport("semigroup", delta, len(d), 3 * se, delta <= 3 * se, {"QLf": float(q.mean()),
                                                                                 "LPf": float(p.mean())})

    run.gate("semigroup", semigroup, needs=[ens])


def _dyson_spec(comb: algebra.CombinedLink, mutate: bool) -> DiffusionSpec:
    base = comb.base_spec

    def drift(z):
        extra = comb.combined_drift(z) - base.drift(z)
        return base.drift(z) - extra if mutate else base.drift(z) + extra

    return DiffusionSpec(2, drift, base.diffusion, weyl_chamber(2), name="combined",
                         constant_diffusion=base.constant_diffusion)


def _orthogonal_combine(run: _Run) -> None:
    cfg = run.cfg
    above, below = kernels.half_line_indicator("above"), kernels.half_line_indicator("below")
    run.add("orthogonality", verify.orthogonality_check(
        above, below, _ones, brownian(1),
        verify.GridSpec(((-1.5, -0.5), (0.5, 1.5), (-2.03, 2.03)), (8, 8, 9), h=1e-4), tol=1e-6))
    # the integrand defining eta is piecewise constant, so a short Gauss rule is exact
    comb = algebra.combine_orthogonal(above, below, _ones, brownian(1), n=8)
    rng = RngStreams(cfg.seed).substream(1 << 20)
    x = rng.uniform(-2.0, 1.0, 64)
    z = np.stack([x, x + rng.uniform(0.2, 2.0, 64)], axis=1)
    want = np.stack([-1.0 / (z[:, 1] - z[:, 0]), 1.0 / (z[:, 1] - z[:, 0])], axis=1)
    err = float(np.max(np.abs(comb.combined_drift(z) - want)))
    run.flag("dyson-drift", err <= 1e-6, err, 1e-6, len(z))
    eta_err = float(np.max(np.abs(comb.eta(z) - (z[:, 1] - z[:, 0]))))
    run.flag("eta=y-x", eta_err <= 1e-8, eta_err, 1e-8, len(z))
    s = z[:, :1] + rng.random((64, 1)) * (z[:, 1:] - z[:, :1])
    psi_err = float(np.max(np.abs(comb.psi.density(z, s) - 1.0 / (z[:, 1] - z[:, 0]))))
    run.flag("psi-uniform", psi_err <= 1e-8, psi_err, 1e-8, len(z))
    run.add("harmonic:eta", verify.harmonicity_check(
        comb.eta, comb.base_spec, verify.GridSpec(((-2.0, -0.5), (0.5, 2.0)), (8, 8), h=1e-3), tol=1e-4))
    # orthogonal waves: plane waves along orthonormal directions have vanishing cross carre-du-champ
    f, df = np.cos, lambda v: -np.sin(v)
    w1 = kernels.plane_wave_kernel(lambda v: 2.0 + f(v), df, [0.6, 0.8])
    w2 = kernels.plane_wave_kernel(lambda v: 2.0 + f(v), df, [-0.8, 0.6])
    run.add("orthogonal-waves", verify.orthogonality_check(
        w1, w2, _ones, brownian(2), verify.GridSpec(((-1.0, 1.0), (-1.0, 1.0), (-1, 1), (-1, 1)), (8, 8, 8, 8),
                                                   h=1e-3), tol=1e-8))
    x0, y0 = float(cfg.kernel["x0"]), float(cfg.kernel["y0"])
    spec = _dyson_spec(comb, cfg.mutate)
    T = cfg.T
    ens = run.simulate("dyson", lambda: simulate(spec, [x0, y0], cfg.dt, T, cfg.n_paths, cfg.seed, record_every=T,
                                                 workers=cfg.workers))
    # the gap of 2d Dyson BM over sqrt(2) is a 3-dimensional Bessel process
    gap = lambda x, y: (y[:, 1] - y[:, 0]) / math.sqrt(2.0)
    a0 = (y0 - x0) / math.sqrt(2.0)
    run.gate("ks:gap~Bessel3", lambda: marginal_check(_as_xy(ens, 0), gap, T, _bessel3_cdf(a0, T), run.alpha,
                                                      run.ks_threshold), needs=[ens])
    run.gate("ks:centre~N", lambda: marginal_check(
        _as_xy(ens, 0), lambda x, y: (y[:, 0] + y[:, 1]) / math.sqrt(2.0), T,
        _normal_cdf(T, (x0 + y0) / math.sqrt(2.0)), run.alpha, run.ks_threshold), needs=[ens])


def _duality_circle(run: _Run) -> None:
    cfg = run.cfg
    coeffs = {int(k): float(v) for k, v in dict(cfg.kernel["coeffs"]).items()}
    link = kernels.chebyshev_torus_kernel(coeffs)
    h1 = lambda x: _ones(x) / (2 * np.pi)
    h2 = _arcsine
    pair = algebra.InvariantDensityPair(h1, h2, (0.0, 2 * np.pi), (-1.0, 1.0))
    dl = algebra.dual(link, pair)
    back = algebra.dual(dl, pair.swapped())
    g = np.linspace(-0.95, 0.95, 12)
    th = np.linspace(0.1, 6.0, 12)
    Y, X = np.meshgrid(g, th, indexing="ij")
    ys, xs = Y.reshape(-1, 1), X.reshape(-1, 1)
    orig = link.density(ys, xs)
    rel = float(np.max(np.abs(back.density(ys, xs) - orig) / np.abs(orig)))
    run.flag("dual-involution", rel <= 1e-8, rel, 1e-8, len(xs))
    mass = kernels.kernel_mass(dl, xs[:16])
    merr = float(np.max(np.abs(mass - 1.0)))
    run.flag("dual-stochastic", merr <= 1e-4, merr, 1e-4, 16)
    try:
        sq = lambda y: np.asarray(y, dtype=float)[..., 0] ** 2
        algebra.dual(kernels.pitman_kernel(), algebra.InvariantDensityPair(_ones, sq, (0.0, np.inf), (0.0, np.inf),
                                                                           probability=False))
        run.flag("pitman-dual-rejected", False, 1.0, 0.0, note="sigma-finite pair was accepted")
    except (algebra.AlgebraError, ValueError):
        run.flag("pitman-dual-rejected", True, 0.0, 0.0)
    # the dual link intertwines in the reverse direction: the circle motion is now on top
    x0 = float(cfg.kernel["x0"])
    system = build_system(jacobi(), circle_brownian(2 * np.pi), dl, mutate=cfg.mutate)
    T = cfg.T
    ens = run.simulate("coupled", lambda: simulate(system, system.initial_sampler(x0), cfg.dt, T, cfg.n_paths,
                                                   cfg.seed, record_every=T, workers=cfg.workers))
    run.gate("ks:circle~wrapped-normal", lambda: marginal_check(ens, "y", T, _wrapped_normal_cdf(x0, T, 2 * np.pi),
                                                                run.alpha, run.ks_threshold), needs=[ens])
    run.gate("binned-pit", lambda: conditional_link_check(ens, T, dl, n_bins=10, alpha=run.alpha), needs=[ens])


def _rbm_rate(run: _Run) -> None:
    cfg = run.cfg
    ps = [int(p) for p in cfg.kernel["p"]]
    times = sorted(float(t) for t in cfg.kernel["times"])
    for p in ps:
        _residual(run, _suite_entry(f"rbm_example(p={p})"))
    grid = sorted(set(np.round(np.linspace(0.05, max(times), 20), 12).tolist()) | set(times))
    run.tables["bound"] = []
    for p in ps:
        rows = convergence.verify_rbm_bound(p, grid, n_paths=cfg.n_paths, dt=cfg.dt, seed=cfg.seed + p)
        run.tables["bound"].extend(rows)
        for row in rows:
            if not any(abs(row["t"] - t) < 1e-12 for t in times):
                continue
            closed = math.exp(-0.5 * (p * math.pi) ** 2 * row["t"])
            run.flag(f"oracle:p={p},t={row['t']:g}", abs(row["oracle"] - closed) <= 1e-10,
                     abs(row["oracle"] - closed), 1e-10)
            run.flag(f"bound:p={p},t={row['t']:g}", row["pass"], row["mc_survival"] - 3 * row["se"],
                     row["closed_bound"], cfg.n_paths,
                     note=f"oracle={row['oracle']:.6g} S={row['mc_survival']:.6g} se={row['se']:.2g}")
            run.flag(f"chain:p={p},t={row['t']:g}", row["chain"], row["mc_survival"] + 3 * row["se"],
                     row["closed_bound"], cfg.n_paths, mandatory=False,
                     note="literal two-sided chain; see the decisions ledger")
        run.plotdata[f"p{p}"] = (("t", "oracle", "bound", "mc_survival"),
                                 np.array([[r["t"], r["oracle"], r["closed_bound"], r["mc_survival"]] for r in rows]))


def _bm_reflect_pair(run: _Run) -> None:
    cfg = run.cfg
    T = cfg.T
    ens = run.simulate("pair", lambda: simulate_reflected_pair(lambda rng, m: np.zeros(m), cfg.dt, T, cfg.n_paths,
                                                               cfg.seed, record_every=T, workers=cfg.workers))
    half_normal = lambda g: erf(np.clip(g, 0.0, None) / (2.0 * math.sqrt(T)))
    run.gate("ks:gap~|N(0,2t)|", lambda: marginal_check(ens, lambda x, y: (y - x)[:, 0], T, half_normal, run.alpha,
                                                         run.ks_threshold), needs=[ens])
    run.gate("ks:Z1~N(0,t)", lambda: marginal_check(ens, "x", T, _normal_cdf(T), run.alpha, run.ks_threshold),
             needs=[ens])
    W = float(cfg.kernel["window"])
    m = min(cfg.n_paths, int(cfg.kernel["window_paths"]))
    win = run.simulate("window", lambda: simulate_reflected_pair(lambda rng, k: rng.uniform(0.0, W, k), cfg.dt, T, m,
                                                                 cfg.seed + 1, record_every=T, workers=cfg.workers))

    def lebesgue():
        g = (win.y_at(T) - win.x_at(T))[:, 0]
        inner = g[(g >= 2.0) & (g <= W - 2.0)]
        counts, _ = np.histogram(inner, bins=8, range=(2.0, W - 2.0))
        return chi2_test(counts, np.full(8, len(inner) / 8.0), run.alpha)

    run.gate("lebesgue-window", lebesgue, mandatory=False, needs=[win])
    if ens is not None:
        g = (ens.y_at(T) - ens.x_at(T))[:, 0]
        run.plotdata["cdf"] = _cdf_overlay(g, half_normal, 0.0, 6.0)


# -- registry -------------------------------------------------------------------


@dataclass(frozen=True)
class _Scenario:
    run: Callable[[_Run], None]
    defaults: dict
    mutable: bool


def _d(dt, T, n, seed, kernel=None, checks=None):
    return {"dt": dt, "T": T, "n_paths": n, "seed": seed, "kernel": kernel or {},
            "checks": {"alpha": 0.01, "ks_threshold": None, **(checks or {})}}


_CHEB = {"1": 0.5, "2": 0.3, "3": 0.1}

_REGISTRY: dict[str, _Scenario] = {
    "cauchy-wave": _Scenario(_cauchy_wave, _d(1e-3, 1.0, 100_000, 42, {"y0": 0.0}, {"ks_threshold": 0.01628}), True),
    "beta-gamma": _Scenario(_beta_gamma, _d(1e-3, 0.5, 20_000, 43, {"alpha": 2.0, "beta": 2.0, "y0": 1.0}), True),
    "pitman": _Scenario(_pitman, _d(1e-3, 1.0, 100_000, 44, {"y0_coupled": 1.0, "coupled_paths": 20_000},
                                    {"ks_threshold": 0.01628}), True),
    "dixon-anderson": _Scenario(_dixon_anderson, _d(1e-3, 1.0, 20_000, 45), False),
    "gt-cone": _Scenario(_gt_cone, _d(1e-4, 1.0, 100_000, 46, checks={"cells": 64, "min_per_bin": 500}), False),
    "whittaker": _Scenario(_whittaker, _d(1e-3, 1.0, 200_000, 47, {"a": [0.0, 0.0], "y0": [-1.0, 1.0]}), False),
    "chebyshev-torus": _Scenario(_chebyshev_torus, _d(1e-3, 1.0, 20_000, 48, {"coeffs": _CHEB, "theta0": 1.0}), True),
    "torus-wave": _Scenario(_torus_wave, _d(1e-4, 0.05, 20_000, 49, {"M": 2.0, "y0": 0.3}), True),
    "spherical-mean": _Scenario(_spherical_mean, _d(1e-2, 0.5, 4_000, 50, {"y0": 1.0}), True),
    "orthogonal-combine": _Scenario(_orthogonal_combine, _d(1e-3, 1.0, 20_000, 51, {"x0": -0.5, "y0": 0.5}), True),
    "duality-circle": _Scenario(_duality_circle, _d(1e-3, 1.0, 20_000, 52, {"coeffs": _CHEB, "x0": 1.0}), True),
    "rbm-rate": _Scenario(_rbm_rate, _d(1e-3, 1.0, 100_000, 7, {"p": [1, 2, 3], "times": [0.1, 0.5, 1.0]}), False),
    "bm-reflect-pair": _Scenario(_bm_reflect_pair, _d(1e-3, 1.0, 100_000, 53,
                                                      {"window": 20.0, "window_paths": 20_000}), False),
}


def list_scenarios() -> list[str]:
    return list(_REGISTRY)


def default_config(name: str) -> ScenarioConfig:
    if name not in _REGISTRY:
        raise ConfigError(f"unknown scenario {name!r}; known: {', '.join(_REGISTRY)}")
    d = _REGISTRY[name].defaults
    return ScenarioConfig(name, d["dt"], d["T"], d["n_paths"], d["seed"], kernel=dict(d["kernel"]),
                          checks=dict(d["checks"]))


def validate_config(cfg: ScenarioConfig) -> None:
    """Raise :class:`ConfigError` unless ``cfg`` can run."""
    base = default_config(cfg.scenario)
    for part in ("kernel", "checks"):
        extra = set(getattr(cfg, part)) - set(getattr(base, part))
        if extra:
            raise ConfigError(f"unknown {part} keys for {cfg.scenario}: {sorted(extra)}")
    if cfg.mutate and not _REGISTRY[cfg.scenario].mutable:
        raise ConfigError(f"{cfg.scenario} has no link drift to negate; --mutate-drift is not applicable")
    steps = cfg.T / cfg.dt
    if abs(steps - round(steps)) > 1e-9 * steps:
        raise ConfigError("sim.T must be a multiple of sim.dt")


def run_scenario(config: ScenarioConfig) -> ScenarioResult:
    validate_config(config)
    run = _Run(config)
    start = time.perf_counter()
    try:
        _REGISTRY[config.scenario].run(run)
    except ConfigError:
        raise
    except Exception as exc:
        raise ScenarioError(f"{config.scenario}: {type(exc).__name__}: {exc}") from exc
    return ScenarioResult(config, run.checks, time.perf_counter() - start, run.plotdata, run.ensembles, run.tables)


def emit_plotdata(result: ScenarioResult, path) -> list[str]:
    """Write ``<scenario>_checks.csv``, one ``.dat`` per curve, any tables and the ensembles; return the file names."""
    os.makedirs(path, exist_ok=True)
    name = result.config.scenario
    written = []
    csv_path = os.path.join(path, f"{name}_checks.csv")
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(result.rows())
    written.append(csv_path)
    for key, (cols, data) in sorted(result.plotdata.items()):
        p = os.path.join(path, f"{name}_{key}.dat")
        np.savetxt(p, np.asarray(data, dtype=float), fmt="%.17g", header=" ".join(cols), comments="# ")
        written.append(p)
    for key, rows in sorted(result.tables.items()):
        p = os.path.join(path, f"{name}_{key}.csv")
        convergence.write_rbm_table(rows, p)
        written.append(p)
    for key, ens in sorted(result.ensembles.items()):
        p = os.path.join(path, f"{name}_{key}.itwe")
        ens.save(p)
        written.append(p)
    return written
