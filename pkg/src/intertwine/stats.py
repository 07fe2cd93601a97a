"""Goodness-of-fit checks for the defining properties of an intertwining.

Every check returns a :class:`GofReport`.  Checks that cannot reach a
verdict (too few samples, standard error too large) raise
:class:`InconclusiveError` so callers can tell "failed" from "undecided".
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats as sps
from scipy.special import kolmogi

from .kernels import LinkKernel, apply_link, conditional_cdf

__all__ = [
    "GofReport",
    "InconclusiveError",
    "chi2_test",
    "conditional_link_check",
    "independence_check",
    "ks_statistic",
    "ks_threshold",
    "marginal_check",
    "martingale_check",
    "semigroup_check",
]

ALPHA = 0.01


class InconclusiveError(ValueError):
    """Not enough information to pass or fail."""


@dataclass(frozen=True)
class GofReport:
    test: str
    statistic: float
    n: int
    threshold: float
    passed: bool
    context: dict = field(default_factory=dict)
    pvalue: float | None = None

    def row(self, scenario: str, check: str) -> dict:
        return {"scenario": scenario, "check": check, "statistic": self.statistic, "n": self.n,
                "threshold": self.threshold, "pass": self.passed}


def ks_threshold(n: int, alpha: float = ALPHA) -> float:
    """Asymptotic Kolmogorov critical value ``c(alpha) / sqrt(n)``."""
    return float(kolmogi(alpha)) / np.sqrt(n)


def ks_statistic(sample, cdf: Callable, alpha: float = ALPHA, threshold: float | None = None,
                 context: dict | None = None) -> GofReport:
    """``D_n = sup |F_n - F|`` for a sorted sample."""
    x = np.asarray(sample, dtype=float)
    n = x.size
    if n < 100:
        raise InconclusiveError(f"KS needs at least 100 points, got {n}")
    if np.any(np.diff(x) < 0):
        raise ValueError("sample must be sorted")
    F = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    D = float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))
    thr = ks_threshold(n, alpha) if threshold is None else float(threshold)
    return GofReport("ks", D, n, thr, bool(D <= thr), dict(context or {}))


def chi2_test(observed, expected, alpha: float = ALPHA, ddof: int = 0, min_expected: float = 20.0,
              context: dict | None = None) -> GofReport:
    """Pearson chi-square; cells with small expectation are rejected, not merged."""
    obs = np.asarray(observed, dtype=float).ravel()
    exp = np.asarray(expected, dtype=float).ravel()
    if np.any(exp < min_expected):
        raise InconclusiveError(f"expected count {exp.min():.1f} below {min_expected}")
    exp = exp * obs.sum() / exp.sum()
    stat, p = sps.chisquare(obs, exp, ddof=ddof)
    return GofReport("chi2", float(stat), int(obs.sum()), alpha, bool(p >= alpha), dict(context or {}), float(p))


def _component(ens, t: float, component) -> np.ndarray:
    z = ens.at(t)
    if callable(component):
        return np.asarray(component(z[:, :ens.x_dim], z[:, ens.x_dim:]), dtype=float)
    if component == "x":
        return z[:, :ens.x_dim].squeeze(-1)
    if component == "y":
        return z[:, ens.x_dim:].squeeze(-1)
    return z[:, int(component)]


def marginal_check(ensemble, component, t: float, reference_cdf: Callable, alpha: float = ALPHA,
                   threshold: float | None = None) -> GofReport:
    """KS of one coordinate (``"x"``, ``"y"``, an index or ``f(x, y)``) at time ``t``."""
    v = np.sort(_component(ensemble, t, component))
    return ks_statistic(v, reference_cdf, alpha, threshold, {"t": t, "component": str(component)})


def conditional_link_check(ensemble, t: float, link: LinkKernel | None = None, n_bins: int = 10,
                           pivot: Callable | None = None, reference_cdf: Callable | None = None,
                           alpha: float = ALPHA, min_per_bin: int = 500, threshold: float | None = None) -> GofReport:
    """Is ``Z1(t)`` distributed as ``Lambda(Z2(t), .)``?

    With a ``pivot(x, y)`` whose law is ``reference_cdf`` for every ``y``
    (e.g. ``x - y`` for a location family) the whole sample is tested at once.
    Otherwise paths are split into equal-count bins of ``Z2(t)`` and the
    probability-integral transform ``F(Z1 | Z2)`` is tested for uniformity in
    each bin at level ``alpha / n_bins``; the worst bin is reported.
    """
    z = ensemble.at(t)
    x, y = z[:, :ensemble.x_dim], z[:, ensemble.x_dim:]
    if pivot is not None:
        v = np.sort(np.asarray(pivot(x, y), dtype=float))
        return ks_statistic(v, reference_cdf, alpha, threshold, {"t": t, "method": "pivot"})
    if link is None or link.x_dim != 1 or link.y_dim != 1:
        raise ValueError("binned conditional checks need a 1d link")
    n = len(z)
    if n // n_bins < min_per_bin:
        raise InconclusiveError(f"{n} paths give fewer than {min_per_bin} per bin")
    u = link.cdf(y, x) if link.cdf is not None else conditional_cdf(link, y, x)
    order = np.argsort(y[:, 0], kind="stable")
    level = alpha / n_bins
    worst, worst_bin = None, -1
    for k, idx in enumerate(np.array_split(order, n_bins)):
        rep = ks_statistic(np.sort(u[idx]), lambda s: np.clip(s, 0.0, 1.0), level)
        if worst is None or rep.statistic / rep.threshold > worst.statistic / worst.threshold:
            worst, worst_bin = rep, k
    ctx = {"t": t, "method": "binned-pit", "bins": n_bins, "worst_bin": worst_bin}
    return GofReport("ks", worst.statistic, n, worst.threshold, worst.passed, ctx)


def semigroup_check(system, f: Callable, t: float, y0, n_paths: int, seed: int, dt: float = 1e-3,
                    mode: str = "coupled", n_quad: int = 256, rel_se: float = 0.1, ensemble=None) -> GofReport:
    """``(Q_t L f)(y0)`` against ``(L P_t f)(y0)`` by Monte Carlo.

    ``coupled`` simulates ``Z`` once from ``(Lambda(y0, .), y0)`` and compares
    ``Lf(Z2(t))`` with ``f(Z1(t))`` pathwise (paired standard error).
    ``separate`` simulates ``Y`` from ``y0`` and ``X`` from link-sampled
    starts with independent seeds (pooled standard error).  A coupled
    ``ensemble`` already started from ``(Lambda(y0, .), y0)`` can be passed
    to skip the simulation.
    """
    from .sde import simulate

    if ensemble is None and n_paths < 100:
        raise InconclusiveError(f"semigroup check needs at least 100 paths, got {n_paths}")
    link = system.link
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))

    def Lf(y):
        return apply_link(link, f, y, n_quad)

    def fx(x):
        return np.asarray(f(x[:, 0] if x.shape[1] == 1 else x), dtype=float)

    if mode == "coupled":
        ens = ensemble if ensemble is not None else simulate(system, system.initial_sampler(y0), dt, t, n_paths,
                                                             seed, record_every=t)
        if len(ens.paths) < 100:
            raise InconclusiveError(f"semigroup check needs at least 100 paths, got {len(ens.paths)}")
        q = Lf(ens.y_at(t))
        p = fx(ens.x_at(t))
        d = q - p
        se = float(np.std(d, ddof=1) / np.sqrt(len(d)))
        qm, pm = float(q.mean()), float(p.mean())
    elif mode == "separate":
        from .kernels import sampler_for

        draw = sampler_for(link)
        ey = simulate(system.specY, y0, dt, t, n_paths, seed * 2 + 1, record_every=t)

        def x_init(rng, m):
            return draw.draw(np.broadcast_to(y0, (m, len(y0))), rng)

        ex = simulate(system.specX, x_init, dt, t, n_paths, seed * 2 + 2, record_every=t)
        q = Lf(ey.at(t))
        p = fx(ex.at(t))
        se = float(np.sqrt(q.var(ddof=1) / len(q) + p.var(ddof=1) / len(p)))
        qm, pm = float(q.mean()), float(p.mean())
    else:
        raise ValueError("mode must be 'coupled' or 'separate'")
    scale = max(abs(qm), abs(pm))
    if scale == 0 or se > rel_se * scale:
        raise InconclusiveError(f"standard error {se:.3g} exceeds {rel_se:.0%} of scale {scale:.3g}")
    delta = abs(qm - pm)
    return GofReport("semigroup", delta, len(q), 3.0 * se, bool(delta <= 3.0 * se),
                     {"t": t, "mode": mode, "QLf": qm, "LPf": pm, "se": se})


def independence_check(ensemble, t: float, pivot: Callable, method: str = "both") -> GofReport:
    """``|corr(u, v)| <= 3/sqrt(n)`` for pivot pairs ``(u, v) = pivot(x, y)``.

    ``method`` is ``pearson``, ``spearman`` or ``both`` (the larger of the two
    is reported); rank correlation is the right choice for heavy tails.
    """
    z = ensemble.at(t)
    u, v = pivot(z[:, :ensemble.x_dim], z[:, ensemble.x_dim:])
    u, v = np.ravel(u), np.ravel(v)
    n = u.size
    if n < 100:
        raise InconclusiveError(f"correlation check needs at least 100 pairs, got {n}")
    if np.std(u) == 0 or np.std(v) == 0:
        raise ValueError("degenerate pivot variance")
    vals = {}
    if method in ("pearson", "both"):
        vals["pearson"] = float(np.corrcoef(u, v)[0, 1])
    if method in ("spearman", "both"):
        vals["spearman"] = float(sps.spearmanr(u, v)[0])
    if not vals:
        raise ValueError("method must be pearson, spearman or both")
    stat = max(abs(c) for c in vals.values())
    thr = 3.0 / np.sqrt(n)
    return GofReport("corr", stat, n, float(thr), bool(stat <= thr), {"t": t, **vals})


def martingale_check(tau: Callable, ensemble, component=None, stop: tuple[float, float] | None = None,
                     bound: float = 1e8, variance=None, seed: int = 0) -> GofReport:
    """``E[tau(Y(t))]`` constant over the grid, within 3 standard errors.

    With ``stop = (lo, hi)`` each path is frozen, clipped onto the barrier,
    at the first exit from ``(lo, hi)``.  Passing the local ``variance`` (a
    number or a function of the state) also detects exits between recorded
    times with a Brownian-bridge test driven by ``seed``; without it a steep
    ``tau`` is biased by the missed excursions.  The statistic is the largest
    ``|mean_k - mean_0| / se_k``.
    """
    paths = ensemble.paths[:, :, ensemble.x_dim:] if component is None else ensemble.paths[:, :, [int(component)]]
    n, m, d = paths.shape
    if stop is not None:
        lo, hi = stop
        out = np.any((paths <= lo) | (paths >= hi), axis=-1)
        if variance is not None and m > 1:
            from .rng import RngStreams

            y0, y1 = paths[:, :-1], paths[:, 1:]
            h = np.diff(ensemble.times)[None, :, None]
            v = variance(y0.reshape(-1, d)).reshape(n, m - 1, -1) if callable(variance) else float(variance)
            with np.errstate(over="ignore", invalid="ignore"):
                p_lo = np.exp(-2.0 * np.clip(y0 - lo, 0, None) * np.clip(y1 - lo, 0, None) / (v * h))
                p_hi = np.exp(-2.0 * np.clip(hi - y0, 0, None) * np.clip(hi - y1, 0, None) / (v * h))
            u = RngStreams(seed).substream(0).random((n, m - 1, d))
            hit_lo, hit_hi = np.any(u < p_lo, axis=-1), np.any(u < p_hi, axis=-1)
            out[:, 1:] |= hit_lo | hit_hi
            paths = paths.copy()
            snap = np.where(hit_lo[..., None], lo, hi)
            bridged = (hit_lo | hit_hi) & ~np.any((y1 <= lo) | (y1 >= hi), axis=-1)
            paths[:, 1:][bridged] = snap[bridged]
        first = np.where(out.any(axis=1), out.argmax(axis=1), m - 1)
        k = np.minimum(np.arange(m)[None, :], first[:, None])
        paths = np.clip(paths[np.arange(n)[:, None], k], lo, hi)
    vals = np.asarray(tau(paths.reshape(n * m, -1)), dtype=float).reshape(n, m)
    if not np.all(np.isfinite(vals)) or (stop is None and np.max(np.abs(vals)) > bound):
        raise ValueError("tau is unbounded on the visited range; pass a stopping range")
    means = vals.mean(axis=0)
    se = vals.std(axis=0, ddof=1) / np.sqrt(n)
    diff = np.abs(means - means[0])
    with np.errstate(invalid="ignore", divide="ignore"):
        z = np.where(diff == 0, 0.0, diff / se)
    stat = float(np.max(z))
    return GofReport("martingale", stat, n, 3.0, bool(stat <= 3.0), {"means": means.tolist()})
