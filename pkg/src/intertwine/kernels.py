"""Catalog of link kernels and their samplers.

A link kernel ``Lambda(y, x)`` is the conditional density of the lower process
``x`` given the upper process ``y``.  Arrays follow the convention of
:mod:`intertwine.domains`: the trailing axis holds coordinates and leading
axes broadcast, so ``density(y, x)`` evaluates a whole grid at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial, pi
from typing import Callable, Mapping

import numpy as np
from scipy import special

from .diffusion import DiffusionSpec, ScalarField
from .domains import Domain, box, full_space, torus
from .quadrature import composite_nodes, gauss_legendre, integrate_interval

__all__ = [
    "KernelError",
    "LinkKernel",
    "SamplerHandle",
    "apply_link",
    "beta_gamma_kernel",
    "cauchy_kernel",
    "chebyshev_torus_kernel",
    "conditional_cdf",
    "dalembert_kernel",
    "dixon_anderson_kernel",
    "gaussian_density",
    "gaussian_kernel",
    "half_line_indicator",
    "kernel_mass",
    "pitman_indicator",
    "plane_wave_kernel",
    "pitman_kernel",
    "reparametrize_y",
    "sampler_for",
    "smoothed_indicator",
    "spherical_mean_kernel",
    "torus_wave_kernel",
    "whittaker_link",
    "whittaker_psi",
    "whittaker_specs",
]


class KernelError(ValueError):
    """Invalid kernel parameters or an unsupported kernel operation."""


Pair = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class LinkKernel:
    """Density ``Lambda(y, x)`` with its y-log-gradient and support sections.

    ``formula`` is the smooth closed form (it may be evaluated slightly
    outside the support by boundary finite differences); ``density`` masks it
    with ``in_support``.  ``window(y)`` returns finite quadrature bounds in x.
    """

    name: str
    y_dim: int
    x_dim: int
    formula: Pair
    grad_log_y: Pair
    in_support: Pair
    section: Callable[[np.ndarray], Domain]
    window: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]
    mass: str = "stochastic"
    heavy_tail: bool = False
    periodic: bool = False
    cdf: Pair | None = None
    sampler: Callable | None = None
    reflect_y: Pair | None = None
    params: Mapping = field(default_factory=dict, compare=False)

    def density(self, y, x) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
            val = self.formula(y, x)
        return np.where(self.in_support(y, x), val, 0.0)

    __call__ = density


@dataclass(frozen=True)
class SamplerHandle:
    """Draws ``x ~ Lambda(y, .)`` for each row of ``y`` from an explicit generator."""

    kernel: LinkKernel
    _draw: Callable

    def draw(self, y, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = np.broadcast_to(y, (1 if size is None else size, self.kernel.y_dim))
        elif size is not None and y.shape[0] != size:
            raise KernelError("size disagrees with the number of y rows")
        return np.asarray(self._draw(np.ascontiguousarray(y), rng), dtype=float).reshape(len(y), self.kernel.x_dim)


# -- generic helpers ---------------------------------------------------------


def _col(a, i: int = 0) -> np.ndarray:
    return np.asarray(a, dtype=float)[..., i]


def _true(y, x) -> np.ndarray:
    return np.ones(np.broadcast_shapes(np.shape(y)[:-1], np.shape(x)[:-1]), dtype=bool)


def _center(y: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Midpoint of the window, falling back to the first y coordinate when unbounded."""
    with np.errstate(invalid="ignore"):
        mid = 0.5 * (lo + hi)
    return np.where(np.isfinite(mid), mid, y[:, 0])


def _bounded_nodes(lo, hi, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite rule in ``theta`` for ``x = lo + (hi - lo)(1 - cos theta)/2``.

    The substitution clusters nodes at the window ends, which absorbs
    inverse-square-root endpoint singularities (arcsine-type weights).
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    th, wt = composite_nodes(np.zeros_like(lo), np.full_like(lo, np.pi), max(1, n // 16))
    half = 0.5 * (hi - lo)[..., None]
    return lo[..., None] + half * (1.0 - np.cos(th)), wt * half * np.sin(th)


def _tensor_composite(dim: int, lo, hi, panels: int, order: int = 8):
    pts, wts = [], []
    for i in range(dim):
        t, w = composite_nodes(np.array(lo[i]), np.array(hi[i]), panels, order)
        pts.append(t)
        wts.append(w)
    grid = np.stack(np.meshgrid(*pts, indexing="ij"), axis=-1).reshape(-1, dim)
    weight = np.prod(np.stack(np.meshgrid(*wts, indexing="ij"), axis=-1), axis=-1).reshape(-1)
    return grid, weight


def kernel_mass(kernel: LinkKernel, y, n: int = 256) -> np.ndarray:
    """``int Lambda(y, x) dx`` for each row of ``y`` by Gauss-Legendre quadrature."""
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if kernel.x_dim == 1:
        lo, hi = kernel.window(y)
        lo, hi = lo[:, 0], hi[:, 0]

        def f(xs):
            return kernel.density(y[:, None, :], xs[..., None])

        if kernel.heavy_tail:
            return integrate_interval(f, lo, hi, n, center=_center(y, lo, hi))
        xs, ws = _bounded_nodes(lo, hi, n)
        return np.sum(f(xs) * ws, axis=-1)
    panels = {2: 16, 3: 8}.get(kernel.x_dim, 3)
    out = np.empty(len(y))
    for k, yk in enumerate(y):
        lo, hi = kernel.window(yk)
        pts, wts = _tensor_composite(kernel.x_dim, lo, hi, panels)
        out[k] = sum(float(kernel.density(yk, pts[s:s + 200_000]) @ wts[s:s + 200_000])
                     for s in range(0, len(wts), 200_000))
    return out


def apply_link(kernel: LinkKernel, f: Callable, y, n: int = 256) -> np.ndarray:
    """``(L f)(y) = int f(x) Lambda(y, x) dx`` for many 1d-x sections at once."""
    if kernel.x_dim != 1:
        raise KernelError("apply_link is vectorized for one-dimensional x only")
    y = np.atleast_2d(np.asarray(y, dtype=float))
    lo, hi = kernel.window(y)
    lo, hi = lo[:, 0], hi[:, 0]

    def g(xs):
        return kernel.density(y[:, None, :], xs[..., None]) * f(xs)

    if kernel.heavy_tail:
        return integrate_interval(g, lo, hi, n, center=_center(y, lo, hi))
    xs, ws = _bounded_nodes(lo, hi, n)
    return np.sum(g(xs) * ws, axis=-1)


def conditional_cdf(kernel: LinkKernel, y, x, n: int = 128) -> np.ndarray:
    """``int_{-inf}^{x} Lambda(y, s) ds`` row by row (1d x only)."""
    if kernel.x_dim != 1:
        raise KernelError("conditional cdf needs one-dimensional x")
    y = np.atleast_2d(np.asarray(y, dtype=float))
    x = np.asarray(x, dtype=float).reshape(-1)
    if kernel.cdf is not None:
        return np.asarray(kernel.cdf(y, x[:, None]), dtype=float).reshape(-1)
    lo, hi = kernel.window(y)
    lo, hi = lo[:, 0], hi[:, 0]
    top = np.clip(x, lo, hi)

    def f(xs):
        return kernel.density(y[:, None, :], xs[..., None])

    if kernel.heavy_tail:
        return integrate_interval(f, lo, top, n, center=_center(y, lo, hi))
    xs, ws = composite_nodes(lo, top, max(1, n // 16))
    return np.sum(f(xs) * ws, axis=-1)


# -- samplers ------------------------------------------------------------------

_KNOTS = 4096


def _cdf_table(kernel: LinkKernel, y: np.ndarray):
    lo, hi = kernel.window(y[None, :])
    lo, hi = float(lo[0, 0]), float(hi[0, 0])
    if kernel.heavy_tail:
        c = float(_center(y[None, :], np.array([lo]), np.array([hi]))[0])
        th = np.linspace(np.arctan(lo - c), np.arctan(hi - c), _KNOTS)
        knots = c + np.tan(th)
    else:
        knots = np.linspace(lo, hi, _KNOTS)
    t, w = gauss_legendre(8)
    a, b = knots[:-1], knots[1:]
    half = 0.5 * (b - a)
    pts = a[:, None] + half[:, None] * (t + 1.0)
    vals = kernel.density(np.broadcast_to(y, pts.shape + (len(y),)), pts[..., None])
    pieces = np.sum(vals * w, axis=1) * half
    F = np.concatenate([[0.0], np.cumsum(pieces)])
    return knots, F


def _segment_integral(kernel, y, a, x):
    t, w = gauss_legendre(8)
    half = 0.5 * (x - a)
    pts = a[:, None] + half[:, None] * (t + 1.0)
    vals = kernel.density(np.broadcast_to(y, pts.shape + (len(y),)), pts[..., None])
    return np.sum(vals * w, axis=1) * half


def _table_inverse(kernel: LinkKernel, y: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Invert the tabulated cdf, then bisect inside the bracketing knot cell."""
    knots, F = _cdf_table(kernel, y)
    target = u * F[-1]
    k = np.clip(np.searchsorted(F, target, side="right") - 1, 0, len(knots) - 2)
    lo, hi = knots[k].copy(), knots[k + 1].copy()
    base = F[k]
    for _ in range(48):
        mid = 0.5 * (lo + hi)
        below = base + _segment_integral(kernel, y, knots[k], mid) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.max(hi - lo) < 1e-10 * (1.0 + np.max(np.abs(lo))):
            break
    return 0.5 * (lo + hi)


def _bisect_cdf(kernel: LinkKernel, y: np.ndarray, u: np.ndarray) -> np.ndarray:
    lo, hi = kernel.window(y)
    lo, hi = lo[:, 0].copy(), hi[:, 0].copy()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        below = conditional_cdf(kernel, y, mid) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.max(hi - lo) < 1e-10 * (1.0 + np.max(np.abs(lo))):
            break
    return 0.5 * (lo + hi)


def _generic_1d_draw(kernel: LinkKernel):
    def draw(y, rng):
        u = rng.random(len(y))
        uniq, inv = np.unique(y, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        if len(uniq) <= 256:
            out = np.empty(len(y))
            for j, yj in enumerate(uniq):
                sel = inv == j
                out[sel] = _table_inverse(kernel, yj, u[sel])
            return out
        if kernel.cdf is None:
            raise KernelError(f"{kernel.name}: too many distinct y values for table sampling")
        return _bisect_cdf(kernel, y, u)

    return draw


def sampler_for(kernel: LinkKernel) -> SamplerHandle:
    """Sampler for ``Lambda(y, .)``: kernel-specific when available, else inverse cdf."""
    if kernel.mass != "stochastic":
        raise KernelError(f"{kernel.name}: sigma-finite kernels cannot be sampled")
    if kernel.sampler is not None:
        return SamplerHandle(kernel, kernel.sampler)
    if kernel.x_dim == 1:
        return SamplerHandle(kernel, _generic_1d_draw(kernel))
    raise KernelError(f"{kernel.name}: no sampler for x_dim={kernel.x_dim}")


def reparametrize_y(kernel: LinkKernel, g: Callable, dg: Callable, name: str | None = None) -> LinkKernel:
    """``Lambda(g(theta), x)`` for a one-dimensional ``y = g(theta)``.

    If ``Lambda`` intertwines X with Y then the new kernel intertwines X with
    ``theta``, the same process in another coordinate.  Useful when Euler
    steps are poor in the original coordinate, e.g. ``y = cos(theta)`` turns
    the Jacobi diffusion into reflected Brownian motion.
    """
    if kernel.y_dim != 1:
        raise KernelError("reparametrize_y needs a one-dimensional y")

    def to_y(theta):
        return np.asarray(g(np.asarray(theta, dtype=float)), dtype=float)

    base = sampler_for(kernel) if kernel.mass == "stochastic" else None
    draw = None if base is None else (lambda th, rng: base.draw(to_y(th), rng))
    cdf = None if kernel.cdf is None else (lambda th, x: kernel.cdf(to_y(th), x))
    return LinkKernel(
        name or f"{kernel.name}@theta", 1, kernel.x_dim,
        lambda th, x: kernel.formula(to_y(th), x),
        lambda th, x: kernel.grad_log_y(to_y(th), x) * np.asarray(dg(np.asarray(th, dtype=float)), dtype=float),
        lambda th, x: kernel.in_support(to_y(th), x),
        lambda th: kernel.section(to_y(th)),
        lambda th: kernel.window(to_y(th)),
        mass=kernel.mass, heavy_tail=kernel.heavy_tail, periodic=kernel.periodic, cdf=cdf, sampler=draw,
        params=dict(kernel.params),
    )


# -- catalog -------------------------------------------------------------------


def cauchy_kernel() -> LinkKernel:
    def formula(y, x):
        return 1.0 / (pi * (1.0 + (_col(y) - _col(x)) ** 2))

    def grad(y, x):
        d = _col(y) - _col(x)
        return (-2.0 * d / (1.0 + d * d))[..., None]

    def cdf(y, x):
        return 0.5 + np.arctan(_col(x) - _col(y)) / pi

    def draw(y, rng):
        return y[:, 0] + np.tan(pi * (rng.random(len(y)) - 0.5))

    return LinkKernel(
        "cauchy", 1, 1, formula, grad, _true,
        section=lambda y: full_space(1),
        window=lambda y: (np.full_like(np.asarray(y, dtype=float), -np.inf), np.full_like(np.asarray(y, dtype=float), np.inf)),
        heavy_tail=True, cdf=cdf, sampler=draw,
    )


def gaussian_kernel(sigma: float = 1.0) -> LinkKernel:
    """``Lambda(y, x) = N(x; y, sigma^2)``, a location family."""
    if sigma <= 0:
        raise KernelError("sigma must be positive")

    def formula(y, x):
        z = (_col(x) - _col(y)) / sigma
        return np.exp(-0.5 * z * z) / (sigma * np.sqrt(2.0 * pi))

    return LinkKernel(
        f"gauss({sigma:g})", 1, 1, formula,
        grad_log_y=lambda y, x: ((_col(x) - _col(y)) / sigma**2)[..., None],
        in_support=_true,
        section=lambda y: full_space(1),
        window=lambda y: (np.asarray(y) - 12 * sigma, np.asarray(y) + 12 * sigma),
        cdf=lambda y, x: special.ndtr((_col(x) - _col(y)) / sigma),
        sampler=lambda y, rng: y[:, 0] + sigma * rng.standard_normal(len(y)),
        params={"sigma": sigma},
    )


def _below_y(y, x) -> np.ndarray:
    return (_col(x) > 0) & (_col(x) < _col(y))


def _mirror_above(y, x) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    return np.where(y < x, 2.0 * x - y, y)


def beta_gamma_kernel(alpha: float, beta: float) -> LinkKernel:
    """``y^{-1} Beta(alpha, beta)`` density of ``x/y`` on ``(0, y)``."""
    if alpha <= 0 or beta <= 0:
        raise KernelError("alpha and beta must be positive")
    lnB = special.betaln(alpha, beta)

    def formula(y, x):
        y, x = _col(y), _col(x)
        return np.exp((1.0 - alpha - beta) * np.log(y) + (alpha - 1.0) * np.log(x)
                      + (beta - 1.0) * np.log(y - x) - lnB)

    def grad(y, x):
        y, x = _col(y), _col(x)
        return ((1.0 - alpha - beta) / y + (beta - 1.0) / (y - x))[..., None]

    def draw(y, rng):
        return y[:, 0] * rng.beta(alpha, beta, size=len(y))

    return LinkKernel(
        f"beta_gamma({alpha:g},{beta:g})", 1, 1, formula, grad, _below_y,
        section=lambda y: box([0.0], [float(np.asarray(y).reshape(-1)[0])]),
        window=lambda y: (np.zeros_like(np.asarray(y, dtype=float)), np.asarray(y, dtype=float)),
        cdf=lambda y, x: special.betainc(alpha, beta, np.clip(_col(x) / _col(y), 0.0, 1.0)),
        sampler=draw, reflect_y=_mirror_above,
        params={"alpha": alpha, "beta": beta},
    )


def pitman_kernel() -> LinkKernel:
    """Uniform law on ``(0, y)``."""
    return LinkKernel(
        "pitman", 1, 1,
        formula=lambda y, x: np.broadcast_to(1.0 / _col(y), np.broadcast_shapes(np.shape(y)[:-1], np.shape(x)[:-1])),
        grad_log_y=lambda y, x: np.broadcast_to((-1.0 / _col(y))[..., None],
                                                np.broadcast_shapes(np.shape(y)[:-1], np.shape(x)[:-1]) + (1,)),
        in_support=_below_y,
        section=lambda y: box([0.0], [float(np.asarray(y).reshape(-1)[0])]),
        window=lambda y: (np.zeros_like(np.asarray(y, dtype=float)), np.asarray(y, dtype=float)),
        cdf=lambda y, x: np.clip(_col(x) / _col(y), 0.0, 1.0),
        sampler=lambda y, rng: y[:, 0] * rng.random(len(y)),
        reflect_y=_mirror_above,
    )


def pitman_indicator() -> LinkKernel:
    """The unnormalized solution ``1{0 < x < y}`` of the wave equation."""
    shape = lambda y, x: np.broadcast_shapes(np.shape(y)[:-1], np.shape(x)[:-1])
    return LinkKernel(
        "indicator(0,y)", 1, 1,
        formula=lambda y, x: np.ones(shape(y, x)),
        grad_log_y=lambda y, x: np.zeros(shape(y, x) + (1,)),
        in_support=_below_y,
        section=lambda y: box([0.0], [float(np.asarray(y).reshape(-1)[0])]),
        window=lambda y: (np.zeros_like(np.asarray(y, dtype=float)), np.asarray(y, dtype=float)),
        mass="sigma-finite",
        cdf=lambda y, x: np.clip(_col(x), 0.0, _col(y)),
        reflect_y=_mirror_above,
    )


def half_line_indicator(direction: str) -> LinkKernel:
    """``1{s > x}`` (``"above"``) or ``1{s < x}`` (``"below"``), sigma-finite links."""
    if direction not in ("above", "below"):
        raise KernelError("direction must be 'above' or 'below'")
    up = direction == "above"
    shape = lambda y, x: np.broadcast_shapes(np.shape(y)[:-1], np.shape(x)[:-1])

    def in_support(y, x):
        return _col(x) > _col(y) if up else _col(x) < _col(y)

    def window(y):
        y = np.asarray(y, dtype=float)
        inf = np.full_like(y, np.inf)
        return (y, inf) if up else (-inf, y)

    return LinkKernel(
        f"indicator({direction})", 1, 1,
        formula=lambda y, x: np.ones(shape(y, x)),
        grad_log_y=lambda y, x: np.zeros(shape(y, x) + (1,)),
        in_support=in_support,
        section=lambda y: box([float(np.ravel(y)[0])], [np.inf]) if up else box([-np.inf], [float(np.ravel(y)[0])]),
        window=window, mass="sigma-finite",
    )


def smoothed_indicator(direction: str, eps: float) -> LinkKernel:
    """Normal-cdf mollification of :func:`half_line_indicator` at scale ``eps``."""
    if direction not in ("above", "below") or eps <= 0:
        raise KernelError("bad direction or eps")
    sgn = 1.0 if direction == "above" else -1.0

    def formula(y, x):
        return special.ndtr(sgn * (_col(x) - _col(y)) / eps)

    def grad(y, x):
        z = sgn * (_col(x) - _col(y)) / eps
        return (-sgn / eps * np.exp(-0.5 * z * z) / np.sqrt(2 * pi) / special.ndtr(z))[..., None]

    def window(y):
        y = np.asarray(y, dtype=float)
        return (y - 12 * eps, np.full_like(y, np.inf)) if sgn > 0 else (np.full_like(y, -np.inf), y + 12 * eps)

    return LinkKernel(f"smoothed_indicator({direction},{eps:g})", 1, 1, formula, grad, _true,
                      lambda y: full_space(1), window, mass="sigma-finite", params={"eps": eps})


def plane_wave_kernel(f: Callable, df: Callable, zeta) -> LinkKernel:
    """``f(t + <s, zeta>)`` with unit ``zeta``: a wave-equation solution in ``(t, s)``."""
    zeta = np.asarray(zeta, dtype=float)
    if abs(np.linalg.norm(zeta) - 1.0) > 1e-12:
        raise KernelError("zeta must be a unit vector")
    m = zeta.size

    def arg(y, x):
        return _col(y) + np.asarray(x, dtype=float) @ zeta

    def window(y):
        y = np.asarray(y, dtype=float)
        inf = np.full(y.shape[:-1] + (m,), np.inf)
        return -inf, inf

    return LinkKernel(
        "plane_wave", 1, m, formula=lambda y, x: f(arg(y, x)),
        grad_log_y=lambda y, x: (df(arg(y, x)) / f(arg(y, x)))[..., None],
        in_support=_true, section=lambda y: full_space(m), window=window, mass="sigma-finite",
        params={"zeta": tuple(zeta)},
    )


def _check_increasing(y: np.ndarray) -> None:
    if np.any(np.diff(y, axis=-1) < 1e-8):
        raise KernelError("y must be strictly increasing with gaps >= 1e-8")


def dixon_anderson_kernel(M: int) -> LinkKernel:
    """Interlaced conditional density of ``M`` points given ``M + 1`` points."""
    if M < 1:
        raise KernelError("M must be >= 1")
    cM = float(factorial(M))

    def vander(z):
        n = z.shape[-1]
        out = np.ones(z.shape[:-1])
        for i in range(n):
            for j in range(i + 1, n):
                out = out * (z[..., j] - z[..., i])
        return out

    def formula(y, x):
        y = np.asarray(y, dtype=float)
        _check_increasing(y)
        return cM * vander(np.asarray(x, dtype=float)) / vander(y)

    def grad(y, x):
        y = np.asarray(y, dtype=float)
        d = y[..., :, None] - y[..., None, :]
        inv = np.where(np.eye(M + 1, dtype=bool), 0.0, 1.0 / np.where(d == 0, np.inf, d))
        g = -inv.sum(axis=-1)
        return np.broadcast_to(g, np.broadcast_shapes(np.shape(y)[:-1], np.shape(x)[:-1]) + (M + 1,))

    def in_support(y, x):
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        return np.all((x >= y[..., :-1]) & (x <= y[..., 1:]), axis=-1)

    def section(y):
        y = np.asarray(y, dtype=float).reshape(-1)
        _check_increasing(y)
        return box(y[:-1], y[1:])

    def draw(y, rng):
        n = len(y)
        out = np.empty((n, M))
        lo, width = y[:, :-1], np.diff(y, axis=1)
        bound = vander(y) / np.prod(width, axis=1) if M > 1 else np.ones(n)
        todo = np.arange(n)
        while todo.size:
            prop = lo[todo] + width[todo] * rng.random((todo.size, M))
            if M == 1:
                acc = np.ones(todo.size, dtype=bool)
            else:
                upper = np.ones(todo.size)
                yt = y[todo]
                for i in range(M):
                    for j in range(i + 1, M):
                        upper = upper * (yt[:, j + 1] - yt[:, i])
                acc = rng.random(todo.size) * upper <= vander(prop)
            out[todo[acc]] = prop[acc]
            todo = todo[~acc]
        del bound
        return out

    def cdf(y, x):
        return np.clip((_col(x) - _col(y, 0)) / (_col(y, 1) - _col(y, 0)), 0.0, 1.0)

    return LinkKernel(
        f"dixon_anderson({M})", M + 1, M, formula, grad, in_support, section,
        window=lambda y: (np.asarray(y, dtype=float)[..., :-1], np.asarray(y, dtype=float)[..., 1:]),
        cdf=cdf if M == 1 else None, sampler=draw, params={"M": M},
    )


def _chebyshev(lmax: int, y: np.ndarray):
    """Three-term recurrences for ``T_l`` and ``T_l' = l U_{l-1}``."""
    T = [np.ones_like(y), y.copy()]
    U = [np.ones_like(y), 2.0 * y]
    for _ in range(2, lmax + 1):
        T.append(2.0 * y * T[-1] - T[-2])
        U.append(2.0 * y * U[-1] - U[-2])
    dT = [np.zeros_like(y)] + [l * U[l - 1] for l in range(1, lmax + 1)]
    return T, dT


def chebyshev_torus_kernel(coeffs, check: bool = True) -> LinkKernel:
    """``(1/2pi)(1 + sum c_l T_l(y) cos(l x))`` on ``[-1, 1] x circle``.

    ``check=False`` skips the summability test so that candidates which may
    go negative can still be built and handed to the positivity check.
    """
    coeffs = tuple((int(l), float(c)) for l, c in dict(coeffs).items())
    if check and sum(abs(c) for _, c in coeffs) > 1.0:
        raise KernelError("sum of |c_l| must not exceed 1")
    if any(l < 1 for l, _ in coeffs):
        raise KernelError("mode indices must be >= 1")
    lmax = max([l for l, _ in coeffs], default=1)

    def series(y, x, deriv=False):
        y, x = _col(y), _col(x)
        T, dT = _chebyshev(lmax, y)
        P = dT if deriv else T
        out = np.zeros(np.broadcast_shapes(y.shape, x.shape))
        for l, c in coeffs:
            out = out + c * P[l] * np.cos(l * x)
        return out

    def formula(y, x):
        return (1.0 + series(y, x)) / (2.0 * pi)

    def grad(y, x):
        return (series(y, x, deriv=True) / (1.0 + series(y, x)))[..., None]

    def cdf(y, x):
        y, x = _col(y), np.mod(_col(x), 2.0 * pi)
        T, _ = _chebyshev(lmax, y)
        out = x.copy() if x.shape == np.broadcast_shapes(y.shape, x.shape) else np.broadcast_to(x, np.broadcast_shapes(y.shape, x.shape)).copy()
        for l, c in coeffs:
            out = out + c * T[l] * np.sin(l * x) / l
        return out / (2.0 * pi)

    return LinkKernel(
        "chebyshev_torus", 1, 1, formula, grad,
        in_support=lambda y, x: np.broadcast_to(np.abs(_col(y)) <= 1.0, np.broadcast_shapes(np.shape(y)[:-1], np.shape(x)[:-1])),
        section=lambda y: torus([2.0 * pi]),
        window=lambda y: (np.zeros_like(np.asarray(y, dtype=float)), np.full_like(np.asarray(y, dtype=float), 2.0 * pi)),
        periodic=True, cdf=cdf, params={"coeffs": coeffs},
    )


def dalembert_kernel(g: Callable, dg: Callable, h: Callable | None = None, dh: Callable | None = None,
                     scale: float = 1.0) -> LinkKernel:
    """``1/2 (g(y-x) + g(y+x)) + 1/2 (h(y+x) - h(y-x))`` for the wave equation."""
    h = h or (lambda s: np.zeros_like(s))
    dh = dh or (lambda s: np.zeros_like(s))

    def formula(y, x):
        y, x = _col(y), _col(x)
        return 0.5 * (g(y - x) + g(y + x)) + 0.5 * (h(y + x) - h(y - x))

    def grad(y, x):
        y, x = _col(y), _col(x)
        d = 0.5 * (dg(y - x) + dg(y + x)) + 0.5 * (dh(y + x) - dh(y - x))
        return (d / formula(y[..., None], x[..., None]))[..., None]

    def window(y):
        y = np.abs(np.asarray(y, dtype=float))
        return -y - 12.0 * scale, y + 12.0 * scale

    return LinkKernel("dalembert", 1, 1, formula, grad, _true, lambda y: full_space(1), window,
                      params={"scale": scale})


def gaussian_density(m: int, sigma: float = 1.0) -> tuple[ScalarField, Callable]:
    """Centered Gaussian density on ``R^m`` with its gradient, plus a sampler."""
    norm = (2.0 * pi * sigma**2) ** (-m / 2.0)

    def ev(x):
        return norm * np.exp(-0.5 * np.sum(np.asarray(x) ** 2, axis=-1) / sigma**2)

    def gr(x):
        x = np.asarray(x)
        return -x / sigma**2 * ev(x)[..., None]

    def draw(n, rng):
        return sigma * rng.standard_normal((n, m))

    return ScalarField(ev, gr), draw


def _sphere_rule(m: int, n_theta: int, n_phi: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes on the unit sphere with weights summing to 1 (uniform average)."""
    if m == 2:
        ang = 2.0 * pi * (np.arange(n_phi) + 0.5) / n_phi
        return np.stack([np.cos(ang), np.sin(ang)], axis=1), np.full(n_phi, 1.0 / n_phi)
    if m == 3:
        t, w = gauss_legendre(n_theta)
        ang = 2.0 * pi * (np.arange(n_phi) + 0.5) / n_phi
        ct, ph = np.meshgrid(t, ang, indexing="ij")
        st = np.sqrt(1.0 - ct**2)
        z = np.stack([st * np.cos(ph), st * np.sin(ph), ct], axis=-1).reshape(-1, 3)
        wt = (np.repeat(w, n_phi) / 2.0) / n_phi
        return z, wt
    raise KernelError("spherical means are implemented for m in {2, 3}")


def spherical_mean_kernel(u: ScalarField, m: int, u_sampler: Callable | None = None, scale: float = 1.0,
                          n_theta: int = 24, n_phi: int = 48) -> LinkKernel:
    """Spherical means ``u(r, x)`` of a density ``u`` on ``R^m``, indexed by the radius ``r``."""
    if m < 2:
        raise KernelError("spherical means need m > 1")
    if u.grad is None:
        raise KernelError("spherical_mean needs the gradient of u")
    z, wz = _sphere_rule(m, n_theta, n_phi)
    chunk = max(1, 2_000_000 // len(wz))

    def _avg(fn, y, x):
        r = _col(y)
        x = np.asarray(x, dtype=float)
        shape = np.broadcast_shapes(r.shape, x.shape[:-1])
        r = np.broadcast_to(r, shape).reshape(-1)
        xf = np.broadcast_to(x, shape + (m,)).reshape(-1, m)
        out = np.empty(len(r))
        for s in range(0, len(r), chunk):
            pts = xf[s:s + chunk, None, :] + r[s:s + chunk, None, None] * z
            out[s:s + chunk] = fn(pts) @ wz
        return out.reshape(shape)

    def formula(y, x):
        return _avg(u.eval, y, x)

    def grad(y, x):
        num = _avg(lambda p: np.sum(u.grad(p) * z, axis=-1), y, x)
        return (num / formula(y, x))[..., None]

    def window(y):
        r = np.abs(np.asarray(y, dtype=float))
        half = np.repeat(r + 12.0 * scale, m, axis=-1)
        return -half, half

    def draw(y, rng):
        n = len(y)
        w = u_sampler(n, rng)
        g = rng.standard_normal((n, m))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return w - y[:, :1] * g

    return LinkKernel(
        f"spherical_mean(m={m})", 1, m, formula, grad, _true, lambda y: full_space(m), window,
        sampler=draw if u_sampler is not None else None, params={"m": m, "scale": scale},
    )


def torus_wave_kernel(F: Callable, dF: Callable, M: float, c: float, period: float = 1.0) -> LinkKernel:
    """``(F(y - x) + M) / (c + M period)`` on a circle; ``c = int F`` over one period."""
    grid = np.linspace(0.0, period, 2049)[:-1]
    if np.min(F(grid)) + M <= 0:
        raise KernelError("F + M must be positive")
    xs, ws = composite_nodes(np.array(0.0), np.array(period), 16)
    if abs(float(np.sum(F(xs) * ws)) - c) > 1e-6 * max(1.0, abs(c)):
        raise KernelError("c must equal the integral of F over one period")
    norm = c + M * period

    def formula(y, x):
        return (F(_col(y) - _col(x)) + M) / norm

    def grad(y, x):
        d = _col(y) - _col(x)
        return (dF(d) / (F(d) + M))[..., None]

    return LinkKernel(
        "torus_wave", 1, 1, formula, grad, _true,
        section=lambda y: torus([period]),
        window=lambda y: (np.zeros_like(np.asarray(y, dtype=float)), np.full_like(np.asarray(y, dtype=float), period)),
        periodic=True, params={"M": M, "c": c, "period": period},
    )


# -- Whittaker 2d-growth link ----------------------------------------------------


def _levels(N: int, x: np.ndarray, y: np.ndarray) -> list[np.ndarray]:
    """Split the flattened lower pattern and append ``y`` as the top level."""
    out, k0 = [np.zeros(x.shape[:-1] + (0,))], 0
    for k in range(1, N):
        out.append(x[..., k0:k0 + k])
        k0 += k
    out.append(y)
    return out


def _whittaker_exponent(N: int, a: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    L = _levels(N, x, y)
    T1 = sum(a[k - 1] * (L[k].sum(axis=-1) - L[k - 1].sum(axis=-1)) for k in range(1, N + 1))
    T2 = 0.0
    for k in range(1, N):
        for i in range(k):
            T2 = T2 + np.exp(L[k][..., i] - L[k + 1][..., i]) + np.exp(L[k + 1][..., i + 1] - L[k][..., i])
    return T1 - T2


def _whittaker_dy(N: int, a: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``d/dy (T1 - T2)`` which only involves the level below ``y``."""
    below = _levels(N, x, y)[N - 1]
    shape = np.broadcast_shapes(y.shape[:-1], below.shape[:-1])
    out = np.full(shape + (N,), a[N - 1])
    for i in range(N):
        if i <= N - 2:
            out[..., i] += np.exp(below[..., i] - y[..., i])
        if i >= 1:
            out[..., i] -= np.exp(y[..., i] - below[..., i - 1])
    return out


def _psi2_nodes(y: np.ndarray, W: float, order: int = 16):
    lo = np.min(y, axis=-1) - W
    hi = np.max(y, axis=-1) + W
    panels = int(np.ceil(np.max(hi - lo)))
    return composite_nodes(lo, hi, panels, order)


def whittaker_psi(N: int, a, y, W: float = 40.0, with_grad: bool = False):
    """Normalizer ``psi_a(y) = int exp(T1 - T2) dx`` (and its y-gradient).

    Composite Gauss-Legendre on ``[min y - W, max y + W]`` per coordinate; the
    window is doubled once and the result rejected if it moves by more than
    1e-4 relative.
    """
    a = np.asarray(a, dtype=float)
    y = np.atleast_2d(np.asarray(y, dtype=float))
    first = _psi_core(N, a, y, W, with_grad)
    second = _psi_core(N, a, y, 2.0 * W, with_grad)
    p1 = first[0] if with_grad else first
    p2 = second[0] if with_grad else second
    if np.any(np.abs(p2 - p1) > 1e-4 * np.abs(p2)):
        raise KernelError("Whittaker normalizer did not stabilize under window doubling")
    return second


def _psi_core(N, a, y, W, with_grad):
    if N == 2:
        xs, ws = _psi2_nodes(y, W)
        e = np.exp(_whittaker_exponent(2, a, y[:, None, :], xs[..., None]))
        psi = np.sum(e * ws, axis=-1)
        if not with_grad:
            return psi
        dy = _whittaker_dy(2, a, y[:, None, :], xs[..., None])
        return psi, np.sum(dy * (e * ws)[..., None], axis=1)
    if N == 3:
        Wn = min(W, 12.0)
        psis, grads = [], []
        for yk in y:
            lo, hi = np.min(yk) - Wn, np.max(yk) + Wn
            t, w = composite_nodes(np.array(lo), np.array(hi), int(np.ceil(hi - lo)), 8)
            X1, X2 = np.meshgrid(t, t, indexing="ij")
            WW = np.outer(w, w)
            x2 = np.stack([X1, X2], axis=-1).reshape(-1, 2)
            inner = _psi_core(2, a[:2], x2, Wn, False)
            # exponent of the top step only
            top = a[2] * (yk.sum() - x2.sum(axis=-1))
            top = top - (np.exp(x2[:, 0] - yk[0]) + np.exp(yk[1] - x2[:, 0])
                         + np.exp(x2[:, 1] - yk[1]) + np.exp(yk[2] - x2[:, 1]))
            e = np.exp(top) * inner * WW.reshape(-1)
            psis.append(e.sum())
            if with_grad:
                dy = _whittaker_dy(3, a, np.broadcast_to(yk, (len(x2), 3)), np.concatenate([np.zeros((len(x2), 1)), x2], axis=-1))
                grads.append(dy.T @ e)
        psi = np.array(psis)
        return (psi, np.array(grads)) if with_grad else psi
    raise KernelError("Whittaker link supports N in {2, 3}")


def whittaker_link(N: int, a) -> LinkKernel:
    """Link from the top level ``y`` (length N) to the lower Whittaker pattern."""
    if N not in (2, 3):
        raise KernelError("Whittaker link supports N in {2, 3}")
    a = np.asarray(a, dtype=float)
    if a.shape != (N,):
        raise KernelError("a must have length N")
    xd = N * (N - 1) // 2

    def _flat_psi(y, with_grad=False):
        y = np.asarray(y, dtype=float)
        flat = y.reshape(-1, N)
        uniq, inv = np.unique(flat, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        res = whittaker_psi(N, a, uniq, with_grad=with_grad)
        if with_grad:
            return res[0][inv].reshape(y.shape[:-1]), res[1][inv].reshape(y.shape)
        return res[inv].reshape(y.shape[:-1])

    def formula(y, x):
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        shape = np.broadcast_shapes(y.shape[:-1], x.shape[:-1])
        psi = np.broadcast_to(_flat_psi(y), shape)
        return np.exp(_whittaker_exponent(N, a, np.broadcast_to(y, shape + (N,)), x)) / psi

    def grad(y, x):
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        shape = np.broadcast_shapes(y.shape[:-1], x.shape[:-1])
        psi, dpsi = _flat_psi(y, with_grad=True)
        glog = np.broadcast_to(dpsi / psi[..., None], shape + (N,))
        return _whittaker_dy(N, a, np.broadcast_to(y, shape + (N,)), x) - glog

    def window(y):
        y = np.asarray(y, dtype=float)
        lo = np.min(y, axis=-1, keepdims=True) - 10.0
        hi = np.max(y, axis=-1, keepdims=True) + 10.0
        return np.repeat(lo, xd, axis=-1), np.repeat(hi, xd, axis=-1)

    cdf = _whittaker2_cdf(a) if N == 2 else None
    sampler = None if N == 2 else _whittaker3_gibbs(a)
    return LinkKernel(
        f"whittaker(N={N})", N, xd, formula, grad, _true, lambda y: full_space(xd), window,
        cdf=cdf, sampler=sampler, params={"N": N, "a": tuple(a)},
    )


def whittaker_specs(N: int, a) -> tuple[DiffusionSpec, DiffusionSpec]:
    """Generators paired with :func:`whittaker_link`.

    X is the lower triangular system (levels ``1..N-1``) and Y is Brownian
    motion on ``R^N`` h-transformed by ``psi_a``.
    """
    if N not in (2, 3):
        raise KernelError("Whittaker link supports N in {2, 3}")
    a = np.asarray(a, dtype=float)
    xd = N * (N - 1) // 2
    eye_x, eye_y = np.eye(xd), np.eye(N)

    def drift_x(x):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape)
        out[..., 0] = a[0]
        if N == 3:
            out[..., 1:3] = _whittaker_dy(2, a[:2], x[..., 1:3], x[..., 0:1])
        return out

    def drift_y(y):
        y = np.asarray(y, dtype=float)
        flat = y.reshape(-1, N)
        psi, dpsi = whittaker_psi(N, a, flat, with_grad=True)
        return (dpsi / psi[:, None]).reshape(y.shape)

    specX = DiffusionSpec(xd, drift_x, lambda x: np.broadcast_to(eye_x, np.shape(x)[:-1] + (xd, xd)),
                          full_space(xd), name=f"whittakerX({N})", constant_diffusion=eye_x)
    specY = DiffusionSpec(N, drift_y, lambda y: np.broadcast_to(eye_y, np.shape(y)[:-1] + (N, N)),
                          full_space(N), name=f"whittakerY({N})", constant_diffusion=eye_y)
    return specX, specY


def _whittaker2_cdf(a: np.ndarray):
    """Conditional cdf of the level-1 particle given level 2, self-normalized."""

    def cdf(y, x):
        y = np.asarray(y, dtype=float)
        x = np.asarray(x, dtype=float)
        shape = np.broadcast_shapes(y.shape[:-1], x.shape[:-1])
        yb = np.broadcast_to(y, shape + (2,)).reshape(-1, 2)
        xb = np.broadcast_to(x, shape + (1,)).reshape(-1)
        out = np.empty(len(yb))
        # rows in chunks so the node tables stay small for large ensembles
        for i in range(0, len(yb), 4096):
            out[i:i + 4096] = _chunk(yb[i:i + 4096], xb[i:i + 4096])
        return out.reshape(shape)

    def _chunk(yb, xb):
        lo = np.min(yb, axis=1) - 10.0
        hi = np.max(yb, axis=1) + 10.0
        panels = int(np.ceil(np.max(hi - lo) / 1.0))
        ts, ws = composite_nodes(lo, hi, panels, 16)
        # shift exponents by their max for stability, common to numerator and denominator
        ex = _whittaker_exponent(2, a, yb[:, None, :], ts[..., None])
        shift = np.max(ex, axis=1, keepdims=True)
        total = np.sum(np.exp(ex - shift) * ws, axis=1)
        top = np.clip(xb, lo, hi)
        tp, wp = composite_nodes(lo, top, panels, 16)
        exp_p = _whittaker_exponent(2, a, yb[:, None, :], tp[..., None])
        part = np.sum(np.exp(exp_p - shift) * wp, axis=1)
        return part / total

    return cdf


def _whittaker3_gibbs(a: np.ndarray, sweeps: int = 30, grid: int = 400):
    """Gibbs sweep over the three lower-pattern coordinates, each updated from
    its exact one-dimensional conditional tabulated on a fine grid."""

    def draw(y, rng):
        n = len(y)
        x = np.empty((n, 3))
        # start from a rough interlaced guess
        x[:, 1] = 0.5 * (y[:, 0] + y[:, 1])
        x[:, 2] = 0.5 * (y[:, 1] + y[:, 2])
        x[:, 0] = 0.5 * (x[:, 1] + x[:, 2])
        lo = np.min(y, axis=1) - 10.0
        hi = np.max(y, axis=1) + 10.0
        s = np.linspace(0.0, 1.0, grid)
        for _ in range(sweeps):
            for j in range(3):
                cand = lo[:, None] + (hi - lo)[:, None] * s
                trial = np.repeat(x[:, None, :], grid, axis=1)
                trial[..., j] = cand
                ex = _whittaker_exponent(3, a, y[:, None, :], trial)
                p = np.exp(ex - ex.max(axis=1, keepdims=True))
                c = np.cumsum(0.5 * (p[:, 1:] + p[:, :-1]) * np.diff(cand, axis=1), axis=1)
                c = np.concatenate([np.zeros((n, 1)), c], axis=1)
                u = rng.random(n) * c[:, -1]
                k = np.clip(np.sum(c < u[:, None], axis=1) - 1, 0, grid - 2)
                rows = np.arange(n)
                frac = (u - c[rows, k]) / np.maximum(c[rows, k + 1] - c[rows, k], 1e-300)
                x[:, j] = cand[rows, k] + frac * (cand[rows, k + 1] - cand[rows, k])
        return x

    return draw
