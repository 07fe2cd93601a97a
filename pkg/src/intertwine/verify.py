"""Certification of candidate link kernels on grids.

Residuals of the hyperbolic link equation, boundary identities on moving
faces, positivity and mass, harmonicity and carre-du-champ orthogonality.
Every check returns a :class:`ResidualReport`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import qmc

from .diffusion import (
    DiffusionSpec,
    apply_adjoint,
    apply_generator,
    bessel,
    brownian,
    carre_du_champ,
    circle_brownian,
    default_step,
    dyson,
    jacobi,
    reflected_brownian,
    squared_bessel,
)
from .kernels import (
    LinkKernel,
    beta_gamma_kernel,
    cauchy_kernel,
    chebyshev_torus_kernel,
    dalembert_kernel,
    dixon_anderson_kernel,
    gaussian_density,
    kernel_mass,
    pitman_kernel,
    spherical_mean_kernel,
    torus_wave_kernel,
    whittaker_link,
    whittaker_specs,
)

__all__ = [
    "Face",
    "beta_gamma_identity",
    "GridError",
    "GridSpec",
    "ResidualReport",
    "SuiteEntry",
    "default_suite",
    "dixon_anderson_faces",
    "harmonicity_check",
    "moving_boundary_residual",
    "order_check",
    "orthogonality_check",
    "pde_residual",
    "pitman_faces",
    "positivity_and_mass",
    "run_suite",
]


class GridError(ValueError):
    """Malformed grid, grid point outside the support, or malformed face."""


@dataclass(frozen=True)
class GridSpec:
    """Tensor grid over the listed axes, with an interior margin in units of ``h``.

    ``h=None`` uses the scale-aware default step.  With ``restrict=True``
    nodes outside the support (or closer than the margin) are skipped;
    otherwise they raise :class:`GridError`.
    """

    ranges: tuple[tuple[float, float], ...]
    counts: tuple[int, ...]
    margin: float = 2.0
    h: float | None = None
    restrict: bool = True

    def __post_init__(self):
        if len(self.ranges) != len(self.counts):
            raise GridError("ranges and counts differ in length")
        if any(c < 8 for c in self.counts):
            raise GridError("at least 8 nodes per axis")
        if self.margin < 2:
            raise GridError("margin must be >= 2")
        if self.h is not None and self.h <= 0:
            raise GridError("h must be positive")

    def points(self) -> np.ndarray:
        axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(self.ranges, self.counts)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))

    def with_h(self, h: float) -> "GridSpec":
        return GridSpec(self.ranges, self.counts, self.margin, h, self.restrict)


@dataclass(frozen=True)
class ResidualReport:
    name: str
    max_abs: float
    l2: float
    worst_point: np.ndarray
    grid: GridSpec | None
    tol: float
    passed: bool
    n_points: int
    h: float | None = None
    extra: dict = field(default_factory=dict, compare=False)

    def row(self, scenario: str = "") -> dict:
        return {
            "scenario": scenario,
            "kernel": self.name,
            "grid_h": "default" if self.h is None else f"{self.h:.3g}",
            "max_abs": f"{self.max_abs:.6e}",
            "l2": f"{self.l2:.6e}",
            "pass": int(self.passed),
        }


def _report(name, values, points, grid, tol, h, **extra) -> ResidualReport:
    values = np.abs(np.asarray(values, dtype=float))
    if values.size == 0:
        raise GridError(f"{name}: no grid point inside the support")
    i = int(np.argmax(values))
    mx = float(values[i])
    return ResidualReport(name, mx, float(np.sqrt(np.mean(values**2))), np.asarray(points[i]), grid, tol,
                          bool(mx <= tol), int(values.size), h, extra)


def _interior(link: LinkKernel, y: np.ndarray, x: np.ndarray, margin: np.ndarray) -> np.ndarray:
    ok = np.array(link.in_support(y, x), dtype=bool)
    if link.periodic:
        return ok
    for i in np.nonzero(ok)[0]:
        ok[i] = link.section(y[i]).distance_to_boundary(x[i]) > margin[i]
    return ok


def pde_residual(link: LinkKernel, specX: DiffusionSpec, specY: DiffusionSpec, grid: GridSpec,
                 tol: float = 1e-4) -> ResidualReport:
    """Residual ``(A^X)* Lambda(y, .)(x) - A^Y Lambda(., x)(y)`` at every interior grid node."""
    dy, dx = link.y_dim, link.x_dim
    if len(grid.ranges) != dy + dx or specX.dim != dx or specY.dim != dy:
        raise GridError("grid axes must be the y axes followed by the x axes")
    pts = grid.points()
    y, x = pts[:, :dy], pts[:, dy:]
    hx = np.full(len(pts), grid.h) if grid.h else default_step(x)
    hy = np.full(len(pts), grid.h) if grid.h else default_step(y)
    h = np.maximum(hx, hy)
    keep = _interior(link, y, x, grid.margin * h)
    keep = keep & (specX.domain.distance_to_boundary(x) > grid.margin * hx)
    keep = keep & (specY.domain.distance_to_boundary(y) > grid.margin * hy)
    if not grid.restrict and not np.all(keep):
        raise GridError(f"grid point outside the support: {pts[np.argmin(keep)]}")
    y, x, hx, hy = y[keep], x[keep], hx[keep], hy[keep]
    lhs = apply_adjoint(specX, lambda p: link.density(y, p), x, hx)
    rhs = apply_generator(specY, lambda q: link.density(q, x), y, hy)
    return _report(link.name, lhs - rhs, pts[keep], grid, tol, grid.h, lhs=lhs, rhs=rhs, nodes=pts[keep])


def order_check(link: LinkKernel, specX: DiffusionSpec, specY: DiffusionSpec, grid: GridSpec, h0: float,
                floor: float = 1e-9, factor: float = 3.5) -> tuple[bool, float, float, float]:
    """Residual at ``h0`` and ``h0/2``; returns ``(ok, r_h, r_h2, ratio)``.

    Kernels whose residual at ``h0`` is below ``floor`` are exact to
    roundoff (the finite-difference errors of both sides cancel) and pass.
    """
    r1 = pde_residual(link, specX, specY, grid.with_h(h0), tol=np.inf).max_abs
    r2 = pde_residual(link, specX, specY, grid.with_h(h0 / 2), tol=np.inf).max_abs
    ratio = r1 / r2 if r2 > 0 else np.inf
    return bool(r1 < floor or ratio >= factor), r1, r2, ratio


# -- moving faces ---------------------------------------------------------------


@dataclass(frozen=True)
class Face:
    """A face of ``D(y)``: unit outward normal ``eta``, boundary velocities ``psi``.

    ``psi[j]`` is the derivative of the face position with respect to
    ``y_j``.  ``place(u)`` maps quasi-uniform ``u`` in ``[0,1)^k`` to
    ``(y, x)`` points on the face.
    """

    name: str
    eta: np.ndarray
    psi: np.ndarray
    place: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    param_dim: int

    def validate(self, y_dim: int, x_dim: int) -> None:
        eta, psi = np.asarray(self.eta, dtype=float), np.asarray(self.psi, dtype=float)
        if eta.shape != (x_dim,) or psi.shape != (y_dim, x_dim):
            raise GridError(f"face {self.name}: eta/psi shapes do not match the kernel")
        if abs(np.linalg.norm(eta) - 1.0) > 1e-12:
            raise GridError(f"face {self.name}: eta must be a unit vector")
        if np.any(psi != 0) and not np.allclose(psi.T @ (psi @ eta), eta, atol=1e-12):
            raise GridError(f"face {self.name}: eta is not spanned by the psi directions")


def moving_boundary_residual(link: LinkKernel, specX: DiffusionSpec, specY: DiffusionSpec, face: Face,
                             n_points: int = 64, tol: float = 1e-6, h: float = 1e-5) -> ResidualReport:
    """Both sides of the moving-boundary identity at quasi-uniform face points.

    Residual is ``Lambda <b, eta> - <grad_x Lambda, eta> - sum_j <psi_j, eta>
    (gamma_j Lambda + d_{y_j} Lambda)`` for unit diffusion matrices.
    """
    face.validate(link.y_dim, link.x_dim)
    u = qmc.Halton(face.param_dim, scramble=False).random(n_points + 1)[1:]
    y, x = face.place(u)
    for spec, pts in ((specX, x), (specY, y)):
        a = spec.a(pts)
        if not np.allclose(a, np.eye(spec.dim), atol=1e-12):
            raise GridError("the face identity assumes unit diffusion matrices")
    eta = np.asarray(face.eta, dtype=float)
    psi = np.asarray(face.psi, dtype=float)
    lam = link.formula(y, x)

    def grad(fn, z):
        out = np.empty(z.shape)
        for i in range(z.shape[-1]):
            e = np.zeros(z.shape[-1])
            e[i] = h
            out[..., i] = (fn(z + e) - fn(z - e)) / (2.0 * h)
        return out

    gx = grad(lambda p: link.formula(y, p), x)
    gy = grad(lambda q: link.formula(q, x), y)
    b, gamma = specX.b(x), specY.b(y)
    lhs = lam * (b @ eta) - gx @ eta
    proj = psi @ eta
    rhs = np.sum(proj * (gamma * lam[:, None] + gy), axis=-1)
    pts = np.concatenate([y, x], axis=1)
    return _report(f"{link.name}:{face.name}", lhs - rhs, pts, None, tol, h, lhs=lhs, rhs=rhs)


def dixon_anderson_faces(M: int) -> list[Face]:
    """The ``2M`` faces ``x_i = y_i`` and ``x_i = y_{i+1}`` of the interlacing box."""
    faces = []
    for i in range(M):
        for upper in (False, True):
            eta = np.zeros(M)
            eta[i] = 1.0 if upper else -1.0
            psi = np.zeros((M + 1, M))
            psi[i + 1 if upper else i, i] = 1.0

            def place(u, i=i, upper=upper):
                y0 = -1.0 + 2.0 * u[:, 0]
                gaps = 0.5 + 1.5 * u[:, 1:M + 1]
                y = np.concatenate([y0[:, None], y0[:, None] + np.cumsum(gaps, axis=1)], axis=1)
                frac = 0.1 + 0.8 * u[:, M + 1:2 * M + 1] if u.shape[1] > M + 1 else np.full((len(u), M), 0.5)
                x = y[:, :-1] + frac * np.diff(y, axis=1)
                x[:, i] = y[:, i + 1] if upper else y[:, i]
                return y, x

            faces.append(Face(f"x{i + 1}={'y' + str(i + 2) if upper else 'y' + str(i + 1)}", eta, psi, place, 2 * M + 1))
    return faces


def pitman_faces() -> list[Face]:
    """Moving face ``x = y`` of ``D(y) = (0, y)``."""

    def place(u):
        y = 0.5 + 4.5 * u[:, :1]
        return y, y.copy()

    return [Face("x=y", np.array([1.0]), np.array([[1.0]]), place, 1)]


# -- positivity, harmonicity, orthogonality -------------------------------------------


def positivity_and_mass(link: LinkKernel, y_samples, n: int = 64, mass_tol: float = 1e-6) -> ResidualReport:
    """Minimum density on a grid of each section and the deviation of its mass from 1."""
    ys = np.atleast_2d(np.asarray(y_samples, dtype=float))
    worst_val, worst_pt, mass_err = np.inf, None, 0.0
    per_axis = n if link.x_dim == 1 else max(8, int(round(n ** (1.0 / link.x_dim))) + 4)
    for yk in ys:
        lo, hi = link.window(yk)
        axes = []
        for a, b in zip(np.ravel(lo), np.ravel(hi)):
            if np.isfinite(a) and np.isfinite(b):
                axes.append(a + (b - a) * (np.arange(per_axis) + 0.5) / per_axis)
            else:
                c = float(yk[0])
                ta = np.arctan(a - c) if np.isfinite(a) else -0.5 * np.pi
                tb = np.arctan(b - c) if np.isfinite(b) else 0.5 * np.pi
                axes.append(c + np.tan(ta + (tb - ta) * (np.arange(per_axis) + 0.5) / per_axis))
        if link.periodic:
            axes = [np.linspace(np.ravel(lo)[0], np.ravel(hi)[0], per_axis, endpoint=False)]
        xs = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, link.x_dim)
        vals = link.density(yk, xs)
        i = int(np.argmin(vals))
        if vals[i] < worst_val:
            worst_val, worst_pt = float(vals[i]), np.concatenate([yk, xs[i]])
        if link.mass == "stochastic":
            mass_err = max(mass_err, float(abs(kernel_mass(link, yk[None, :])[0] - 1.0)))
    positive = worst_val >= -1e-14
    return ResidualReport(f"{link.name}:positivity_mass", mass_err, mass_err, worst_pt, None, mass_tol,
                          bool(positive and mass_err <= mass_tol), len(ys),
                          extra={"min_density": worst_val, "positive": positive, "mass": link.mass})


def harmonicity_check(tau, specY: DiffusionSpec, grid: GridSpec, tol: float = 1e-4) -> ResidualReport:
    """``max |A^Y tau|`` on the grid; ``tau`` must be positive there."""
    pts = grid.points()
    h = np.full(len(pts), grid.h) if grid.h else default_step(pts)
    keep = specY.domain.distance_to_boundary(pts) > grid.margin * h
    pts, h = pts[keep], h[keep]
    if np.any(np.asarray(tau(pts)) <= 0):
        raise GridError("tau must be positive on the grid")
    vals = apply_generator(specY, tau, pts, h)
    return _report("harmonicity", vals, pts, grid, tol, grid.h)


def orthogonality_check(link1: LinkKernel, link2: LinkKernel, h3, specS: DiffusionSpec, grid: GridSpec,
                        tol: float = 1e-8) -> ResidualReport:
    """``max |Gamma^S(Lambda1(x, .)/h3, Lambda2(y, .)/h3)|`` over grid triples ``(x, y, s)``."""
    d1, d2 = link1.y_dim, link2.y_dim
    if len(grid.ranges) != d1 + d2 + specS.dim:
        raise GridError("grid axes must be x, y then s")
    pts = grid.points()
    x, y, s = pts[:, :d1], pts[:, d1:d1 + d2], pts[:, d1 + d2:]
    h = np.full(len(pts), grid.h) if grid.h else default_step(s)
    keep = specS.domain.distance_to_boundary(s) > grid.margin * h
    x, y, s, h = x[keep], y[keep], s[keep], h[keep]
    vals = carre_du_champ(specS, lambda p: link1.density(x, p) / h3(p), lambda p: link2.density(y, p) / h3(p), s, h)
    return _report(f"orthogonality({link1.name},{link2.name})", vals, pts[keep], grid, tol, grid.h)


def beta_gamma_identity(alpha: float = 2.0, beta: float = 2.0, n: int = 50, lo: float = 0.1, hi: float = 5.0,
                        h: float = 2e-5, tol: float = 1e-4) -> ResidualReport:
    """Both sides of the Beta-Gamma link PDE against the closed form ``2 E``.

    ``E = (beta-1)/B(alpha,beta) x^(alpha-1) y^(1-alpha-beta) (y-x)^(beta-3)
    ((alpha+beta-2) x - alpha y)``.  The reported value is the worst of the
    three pairwise discrepancies on an ``n x n`` grid of ``lo < x < y < hi``.
    """
    from scipy.special import beta as beta_fn

    rep = pde_residual(beta_gamma_kernel(alpha, beta), squared_bessel(2 * alpha), squared_bessel(2 * (alpha + beta)),
                       GridSpec(((lo, hi), (lo, hi)), (n, n), h=h), tol)
    lhs, rhs = rep.extra["lhs"], rep.extra["rhs"]
    y, x = rep.extra["nodes"][:, 0], rep.extra["nodes"][:, 1]
    E = ((beta - 1.0) / beta_fn(alpha, beta) * x ** (alpha - 1.0) * y ** (1.0 - alpha - beta)
         * (y - x) ** (beta - 3.0) * ((alpha + beta - 2.0) * x - alpha * y))
    diffs = np.stack([lhs - rhs, lhs - 2.0 * E, rhs - 2.0 * E])
    worst = np.max(np.abs(diffs), axis=0)
    return _report(f"beta_gamma_identity({alpha:g},{beta:g})", worst, np.stack([y, x], axis=1), rep.grid, tol, h,
                   lhs_rhs=float(np.max(np.abs(diffs[0]))), lhs_E=float(np.max(np.abs(diffs[1]))),
                   rhs_E=float(np.max(np.abs(diffs[2]))))


# -- default suite -----------------------------------------------------------------


@dataclass(frozen=True)
class SuiteEntry:
    name: str
    link: LinkKernel
    specX: DiffusionSpec
    specY: DiffusionSpec
    grid: GridSpec
    order_h: float
    order_grid: GridSpec | None = None
    acceptance: bool = True
    tol: float = 1e-4


def default_suite(include_extended: bool = True) -> list[SuiteEntry]:
    """Catalog kernels paired with their generators and default grids."""
    from .convergence import rbm_example_link

    suite = [
        SuiteEntry("cauchy", cauchy_kernel(), brownian(1), brownian(1),
                   GridSpec(((-3, 3), (-3, 3)), (16, 16), h=1e-3), 1e-3),
        SuiteEntry("beta_gamma(2,2)", beta_gamma_kernel(2, 2), squared_bessel(4), squared_bessel(8),
                   GridSpec(((0.1, 5), (0.1, 5)), (50, 50), h=2e-5), 1e-3,
                   order_grid=GridSpec(((0.5, 5), (0.5, 5)), (16, 16))),
        SuiteEntry("pitman", pitman_kernel(), reflected_brownian(0.0), bessel(3.0),
                   GridSpec(((0.5, 5), (0.05, 5)), (16, 16), h=1e-3), 1e-3),
        SuiteEntry("dixon_anderson(1)", dixon_anderson_kernel(1), brownian(1), dyson(2),
                   GridSpec(((-2, -0.2), (0.3, 2), (-2, 2)), (10, 10, 12), h=1e-3), 1e-3),
        SuiteEntry("dixon_anderson(2)", dixon_anderson_kernel(2), dyson(2), dyson(3),
                   GridSpec(((-2, -1), (-0.5, 0.5), (1, 2), (-2, 0.5), (-0.5, 2)), (8, 8, 8, 8, 8), h=1e-3), 1e-3),
        SuiteEntry("chebyshev_torus", chebyshev_torus_kernel({1: 0.5, 2: 0.3, 3: 0.1}), circle_brownian(2 * np.pi), jacobi(),
                   GridSpec(((-0.9, 0.9), (0.0, 2 * np.pi)), (16, 16), h=1e-3), 1e-2),
        SuiteEntry("torus_wave", _torus_wave_default(), circle_brownian(1.0), circle_brownian(1.0),
                   GridSpec(((0.0, 1.0), (0.0, 1.0)), (16, 16), h=1e-3), 1e-3),
        SuiteEntry("spherical_mean(m=3)", _spherical_default(), brownian(3), bessel(3.0),
                   GridSpec(((0.3, 2.0), (-1.5, 1.5), (-1.5, 1.5), (-1.5, 1.5)), (8, 8, 8, 8), h=1e-3), 1e-2),
    ]
    for p in (1, 2, 3):
        suite.append(SuiteEntry(f"rbm_example(p={p})", rbm_example_link(p), reflected_brownian(0.0, 1.0), brownian(1),
                                GridSpec(((-1, 1), (0, 1)), (16, 16), h=1e-3), 1e-3))
    if include_extended:
        from scipy.stats import norm

        sx, sy = whittaker_specs(2, [0.3, -0.2])
        suite += [
            SuiteEntry("whittaker(N=2)", whittaker_link(2, [0.3, -0.2]), sx, sy,
                       GridSpec(((-1, 1), (-1, 1), (-1.5, 1.5)), (8, 8, 8), h=1e-3), 1e-2, acceptance=False),
            SuiteEntry("dalembert", dalembert_kernel(norm.pdf, lambda s: -s * norm.pdf(s)), brownian(1), brownian(1),
                       GridSpec(((-3, 3), (-3, 3)), (16, 16), h=1e-3), 1e-3, acceptance=False),
        ]
    return suite


def _torus_wave_default() -> LinkKernel:
    k = 2.0 * np.pi
    return torus_wave_kernel(lambda u: np.cos(k * u), lambda u: -k * np.sin(k * u), 2.0, 0.0, period=1.0)


def _spherical_default() -> LinkKernel:
    u, draw = gaussian_density(3)
    return spherical_mean_kernel(u, 3, draw)


def run_suite(entries: Sequence[SuiteEntry] | None = None, order: bool = True) -> list[tuple[SuiteEntry, ResidualReport, tuple]]:
    """Residual report and (optionally) the halving-order result for every entry."""
    out = []
    for e in entries if entries is not None else default_suite():
        rep = pde_residual(e.link, e.specX, e.specY, e.grid, e.tol)
        ordr = order_check(e.link, e.specX, e.specY, e.order_grid or e.grid, e.order_h) if order else (True, 0, 0, 0)
        out.append((e, rep, ordr))
    return out
