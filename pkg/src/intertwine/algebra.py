"""Building new links from old ones.

Composition of links, the dual (time-reversed) link, normalization of a
nonnegative PDE solution by its mass together with the matching Doob
h-transform, and the combination of two orthogonal links into one link from
the product space.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from .diffusion import DiffusionSpec, ScalarField, carre_du_champ
from .domains import box, full_space
from .kernels import LinkKernel, kernel_mass
from .quadrature import gauss_legendre

__all__ = [
    "AlgebraError",
    "CombinedLink",
    "InvariantDensityPair",
    "NormalizedKernel",
    "combine_orthogonal",
    "compose",
    "dual",
    "fit_conservation",
    "normalize",
    "product_spec",
    "scaled",
]

Density = Callable[[np.ndarray], np.ndarray]


class AlgebraError(ValueError):
    """A structural precondition failed (identity, orthogonality, integrability)."""


# -- one-dimensional integration with support breaks ------------------------------


def _bisect_break(mask, x_of, a: float, b: float, left: bool) -> float:
    for _ in range(60):
        m = 0.5 * (a + b)
        if bool(mask(np.array([x_of(m)]))[0]) == left:
            a = m
        else:
            b = m
    return 0.5 * (a + b)


def _integrate_pieces(g, lo: float, hi: float, mask=None, n: int = 64, center: float = 0.0,
                      scan: int = 257, grade: int = 10) -> float:
    """``int_lo^hi g(x) dx`` split where ``mask`` changes, Gauss-Legendre per piece.

    Each piece is refined geometrically toward its ends so that integrable
    end singularities (``1/x`` near a support edge) are resolved.  Infinite
    ends use the substitution ``x = center + tan(u)``.
    """
    if hi <= lo:
        return 0.0
    mapped = not (np.isfinite(lo) and np.isfinite(hi))
    if mapped:
        ua, ub = np.arctan(lo - center), np.arctan(hi - center)
        x_of = lambda u: center + np.tan(u)
        jac = lambda u: 1.0 / np.cos(u) ** 2
    else:
        ua, ub = lo, hi
        x_of = lambda u: u
        jac = lambda u: np.ones_like(u)
    edges = [ua]
    if mask is not None:
        us = np.linspace(ua, ub, scan)
        if mapped:
            us = us[1:-1]
        else:
            # nudge the ends inside so strict supports register at the window edges
            us[0] += 1e-13 * (ub - ua)
            us[-1] -= 1e-13 * (ub - ua)
        ms = np.asarray(mask(x_of(us)), dtype=bool)
        for i in np.nonzero(ms[1:] != ms[:-1])[0]:
            edges.append(_bisect_break(mask, x_of, us[i], us[i + 1], bool(ms[i])))
    edges.append(ub)
    t, w = gauss_legendre(n)
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        cuts = _graded(a, b, grade)
        for c, d in zip(cuts[:-1], cuts[1:]):
            half = 0.5 * (d - c)
            u = c + half * (t + 1.0)
            total += float(np.sum(g(x_of(u)) * jac(u) * w) * half)
    return total


def _graded(a: float, b: float, levels: int) -> np.ndarray:
    """Breakpoints of ``[a, b]`` refined geometrically (ratio 1/8) toward both ends."""
    if levels <= 0:
        return np.array([a, b])
    f = 0.5 * 8.0 ** -np.arange(levels, dtype=float)
    return np.concatenate([[a], a + (b - a) * f[::-1], b - (b - a) * f[1:], [b]])


def _fd_grad_log(fn, z: np.ndarray, rel: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of ``log fn`` along the trailing axis."""
    z = np.asarray(z, dtype=float)
    d = z.shape[-1]
    h = rel * (1.0 + np.abs(z))
    out = np.empty(z.shape)
    for i in range(d):
        e = np.zeros(d)
        e[i] = 1.0
        hp = h[..., i:i + 1]
        fp = np.log(fn(z + hp * e))
        fm = np.log(fn(z - hp * e))
        out[..., i] = (fp - fm) / (2.0 * h[..., i])
    return out


def _pairwise(fn, y, x, y_dim: int, x_dim: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    shape = np.broadcast_shapes(y.shape[:-1], x.shape[:-1])
    yf = np.broadcast_to(y, shape + (y_dim,)).reshape(-1, y_dim)
    xf = np.broadcast_to(x, shape + (x_dim,)).reshape(-1, x_dim)
    return np.array([fn(a, b) for a, b in zip(yf, xf)]).reshape(shape)


# -- composition -------------------------------------------------------------------


def compose(link1: LinkKernel, link2: LinkKernel, n: int = 64) -> LinkKernel:
    """Link ``y -> s`` with density ``int Lambda1(y, x) Lambda2(x, s) dx``."""
    if link1.x_dim != link2.y_dim:
        raise AlgebraError("link1.x_dim must equal link2.y_dim")
    if link1.x_dim != 1 or link2.x_dim != 1:
        raise AlgebraError("composition is implemented for one-dimensional intermediate and target spaces")
    if link1.mass != "stochastic" or link2.mass != "stochastic":
        raise AlgebraError("both links must be stochastic")

    def point(y, s):
        lo, hi = link1.window(y)
        lo, hi = float(lo[0]), float(hi[0])
        ys = y[None, :]
        sv = np.array([[s[0]]])

        def g(xs):
            xs = xs[:, None]
            return link1.density(ys, xs) * link2.density(xs, sv)

        def mask(xs):
            xs = xs[:, None]
            return link1.in_support(ys, xs) & link2.in_support(xs, sv)

        return _integrate_pieces(g, lo, hi, mask, n=n, center=float(y[0]))

    def formula(y, s):
        return _pairwise(point, y, s, link1.y_dim, 1)

    def grad(y, s):
        s = np.asarray(s, dtype=float)
        return _fd_grad_log(lambda yy: formula(yy, s), np.broadcast_to(y, np.broadcast_shapes(np.shape(y)[:-1], s.shape[:-1]) + (link1.y_dim,)))

    def window(y):
        y = np.asarray(y, dtype=float)
        lo1, hi1 = link1.window(y)
        with np.errstate(invalid="ignore"):
            ends = [link2.window(e) for e in (lo1, hi1)]
        lo = np.minimum(ends[0][0], ends[1][0])
        hi = np.maximum(ends[0][1], ends[1][1])
        lo = np.where(np.isfinite(lo1), lo, -np.inf)
        hi = np.where(np.isfinite(hi1), hi, np.inf)
        return lo, hi

    def in_support(y, s):
        lo, hi = window(np.asarray(y, dtype=float))
        s = np.asarray(s, dtype=float)
        return ((s > lo) & (s < hi))[..., 0]

    def chained(y, rng):
        x = link1.sampler(y, rng).reshape(len(y), 1)
        return link2.sampler(x, rng)

    sampler = chained if link1.sampler is not None and link2.sampler is not None else None

    return LinkKernel(
        f"({link1.name} o {link2.name})", link1.y_dim, 1, formula, grad, in_support,
        section=lambda y: box(*[np.ravel(v) for v in window(np.asarray(y, dtype=float))]),
        window=window, heavy_tail=link1.heavy_tail or link2.heavy_tail, sampler=sampler,
        params={"parts": (link1.name, link2.name)},
    )


def scaled(link: LinkKernel, factor: float) -> LinkKernel:
    """``factor * Lambda``; the result is sigma-finite unless ``factor == 1``."""
    if factor <= 0:
        raise AlgebraError("factor must be positive")
    return LinkKernel(
        f"{factor:g}*{link.name}", link.y_dim, link.x_dim,
        formula=lambda y, x: factor * link.formula(y, x),
        grad_log_y=link.grad_log_y, in_support=link.in_support, section=link.section, window=link.window,
        mass=link.mass if factor == 1 else "sigma-finite", heavy_tail=link.heavy_tail,
        periodic=link.periodic, reflect_y=link.reflect_y, params=dict(link.params),
    )


# -- duality -----------------------------------------------------------------------


@dataclass(frozen=True)
class InvariantDensityPair:
    """Invariant densities ``h1`` on X and ``h2`` on Y with their integration ranges."""

    h1: Density
    h2: Density
    x_range: tuple[float, float]
    y_range: tuple[float, float]
    h3: Density | None = None
    probability: bool = True

    def swapped(self) -> "InvariantDensityPair":
        return InvariantDensityPair(self.h2, self.h1, self.y_range, self.x_range, self.h3, self.probability)


def _check_points(lo: float, hi: float, k: int) -> np.ndarray:
    q = (np.arange(k) + 0.5) / k
    if np.isfinite(lo) and np.isfinite(hi):
        return lo + (hi - lo) * q
    a = np.arctan(lo) if np.isfinite(lo) else -0.5 * np.pi
    b = np.arctan(hi) if np.isfinite(hi) else 0.5 * np.pi
    return np.tan(a + (b - a) * q)


def _quad_pieces(g, lo: float, hi: float, mask) -> float:
    """Adaptive ``quad`` over the pieces where ``mask`` is constant; raises on failure."""
    if np.isfinite(lo) and np.isfinite(hi):
        us = np.linspace(lo, hi, 1025)[1:-1]
        x_of = lambda u: u
    else:
        a = np.arctan(lo) if np.isfinite(lo) else -0.5 * np.pi
        b = np.arctan(hi) if np.isfinite(hi) else 0.5 * np.pi
        us = np.linspace(a, b, 1025)[1:-1]
        x_of = np.tan
    ms = np.asarray(mask(x_of(us)), dtype=bool)
    cuts = [_bisect_break(mask, x_of, us[i], us[i + 1], bool(ms[i])) for i in np.nonzero(ms[1:] != ms[:-1])[0]]
    edges = [lo] + [float(x_of(c)) for c in cuts] + [hi]
    total = 0.0
    for a, b in zip(edges[:-1], edges[1:]):
        mid = 0.5 * (a + b) if np.isfinite(a) and np.isfinite(b) else (a + 1.0 if np.isfinite(a) else b - 1.0)
        if not bool(mask(np.array([mid]))[0]):
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            val, err = integrate.quad(lambda v: float(g(np.array([v]))[0]), a, b, limit=200)
        if not np.isfinite(val) or err > 1e-6 * max(1.0, abs(val)) or abs(val) > 1e12:
            raise AlgebraError("integral does not converge")
        total += val
    return total


def dual(link: LinkKernel, densities: InvariantDensityPair, n_check: int = 16, tol: float = 1e-4) -> LinkKernel:
    """Dual link ``x -> y`` with density ``Lambda(y, x) h2(y) / h1(x)``.

    The identity ``int Lambda(y, x) h2(y) dy = h1(x)`` is spot-checked at
    ``n_check`` points; failure raises :class:`AlgebraError`.
    """
    if link.x_dim != 1 or link.y_dim != 1:
        raise AlgebraError("duality is implemented for one-dimensional X and Y")
    h1, h2 = densities.h1, densities.h2
    ylo, yhi = densities.y_range
    for xv in _check_points(*densities.x_range, n_check):
        xa = np.array([[xv]])
        target = float(np.ravel(h1(xa))[0])
        if target <= 0:
            raise AlgebraError("h1 must be positive on X")
        got = _quad_pieces(
            lambda ys: link.density(ys[:, None], xa) * np.ravel(h2(ys[:, None])),
            ylo, yhi, lambda ys: link.in_support(ys[:, None], xa),
        )
        if abs(got - target) > tol * max(abs(target), 1e-12):
            raise AlgebraError(f"invariance identity fails at x={xv:.4g}: {got:.6g} vs h1={target:.6g}")

    def formula(x, y):
        return link.formula(y, x) * h2(y) / h1(x)

    def grad(x, y):
        y = np.asarray(y, dtype=float)
        shape = np.broadcast_shapes(np.shape(x)[:-1], y.shape[:-1])
        return _fd_grad_log(lambda xx: link.formula(y, xx) / h1(xx), np.broadcast_to(x, shape + (1,)))

    def window(x):
        x = np.asarray(x, dtype=float)
        return np.full_like(x, ylo), np.full_like(x, yhi)

    return LinkKernel(
        f"dual({link.name})", 1, 1, formula, grad,
        in_support=lambda x, y: link.in_support(y, x) & ((np.asarray(y)[..., 0] >= ylo) & (np.asarray(y)[..., 0] <= yhi)),
        section=lambda x: box([ylo], [yhi]), window=window,
        mass="stochastic", heavy_tail=not (np.isfinite(ylo) and np.isfinite(yhi)), periodic=link.periodic,
        params={"base": link.name},
    )


# -- normalization / h-transform ---------------------------------------------------------


@dataclass(frozen=True)
class NormalizedKernel:
    """``xi = Lambda / tau`` with ``tau`` the mass and the matching drift change."""

    xi: LinkKernel
    tau: ScalarField
    htransform_drift_delta: Callable[[np.ndarray], np.ndarray]


def normalize(link: LinkKernel, specY: DiffusionSpec | None = None, mass_link: LinkKernel | None = None) -> NormalizedKernel:
    """Normalize a nonnegative solution by ``tau(y) = int Lambda(y, x) dx``.

    ``mass_link`` may supply a cheaper kernel with the same x-integral (for
    example a spherical mean with a coarse sphere rule).  The drift delta is
    ``rho(y) grad log tau(y)`` with ``rho`` the Y diffusion matrix (identity
    when ``specY`` is omitted).
    """
    src = mass_link or link
    d = link.y_dim

    def tau_eval(y):
        y = np.asarray(y, dtype=float)
        flat = y.reshape(-1, d)
        m = kernel_mass(src, flat)
        if not np.all(np.isfinite(m)) or np.any(m <= 0):
            raise AlgebraError(f"{link.name}: section is not integrable")
        return m.reshape(y.shape[:-1])

    def tau_grad(y):
        y = np.asarray(y, dtype=float)
        return _fd_grad_log(tau_eval, y) * tau_eval(y)[..., None]

    tau = ScalarField(tau_eval, tau_grad)
    tau_eval(np.zeros((1, d)) + np.ones(d))  # fail early on non-integrable sections

    def grad_log_tau(y):
        return _fd_grad_log(tau_eval, np.asarray(y, dtype=float))

    def delta(y):
        y = np.asarray(y, dtype=float)
        g = grad_log_tau(y)
        if specY is None:
            return g
        return np.einsum("...ij,...j->...i", specY.a(y), g)

    def formula(y, x):
        y = np.asarray(y, dtype=float)
        return link.formula(y, x) / tau_eval(y)

    def grad(y, x):
        y = np.asarray(y, dtype=float)
        return link.grad_log_y(y, x) - grad_log_tau(y)

    xi = LinkKernel(
        f"normalized({link.name})", d, link.x_dim, formula, grad, link.in_support, link.section, link.window,
        mass="stochastic", heavy_tail=link.heavy_tail, periodic=link.periodic, reflect_y=link.reflect_y,
        params=dict(link.params),
    )
    return NormalizedKernel(xi, tau, delta)


def fit_conservation(r, tau_values, m: int) -> tuple[float, float, float]:
    """Least-squares fit ``tau(r) = a + b r^(2-m)``; returns ``(a, b, max residual)``."""
    r = np.asarray(r, dtype=float)
    tv = np.asarray(tau_values, dtype=float)
    basis = np.stack([np.ones_like(r), r ** (2.0 - m)], axis=1)
    (a, b), *_ = np.linalg.lstsq(basis, tv, rcond=None)
    return float(a), float(b), float(np.max(np.abs(basis @ np.array([a, b]) - tv)))


# -- orthogonal combination ----------------------------------------------------------------


def product_spec(specX: DiffusionSpec, specY: DiffusionSpec, extra_drift: Callable | None = None) -> DiffusionSpec:
    """Independent product of two diffusions, optionally with an added drift on the pair."""
    dx, dy = specX.dim, specY.dim

    def drift(z):
        z = np.asarray(z, dtype=float)
        base = np.concatenate([specX.b(z[..., :dx]), specY.b(z[..., dx:])], axis=-1)
        return base if extra_drift is None else base + extra_drift(z)

    def diffusion(z):
        z = np.asarray(z, dtype=float)
        out = np.zeros(z.shape[:-1] + (dx + dy, dx + dy))
        out[..., :dx, :dx] = specX.a(z[..., :dx])
        out[..., dx:, dx:] = specY.a(z[..., dx:])
        return out

    const = None
    if specX.constant_diffusion is not None and specY.constant_diffusion is not None:
        const = np.zeros((dx + dy, dx + dy))
        const[:dx, :dx] = specX.constant_diffusion
        const[dx:, dx:] = specY.constant_diffusion
    return DiffusionSpec(dx + dy, drift, diffusion, full_space(dx + dy), name=f"{specX.name}x{specY.name}",
                         constant_diffusion=const)


@dataclass(frozen=True)
class CombinedLink:
    """``eta`` on Z = X x Y, the stochastic link ``psi`` from Z to S and the h-transformed drift."""

    eta: ScalarField
    psi: LinkKernel
    combined_drift: Callable[[np.ndarray], np.ndarray]
    base_spec: DiffusionSpec
    spec: DiffusionSpec

    def as_link(self) -> LinkKernel:
        """The unnormalized product ``eta * psi`` as a sigma-finite link, for iterating."""
        return scaled_by(self.psi, self.eta)


def scaled_by(link: LinkKernel, weight: ScalarField) -> LinkKernel:
    return LinkKernel(
        f"w*{link.name}", link.y_dim, link.x_dim,
        formula=lambda y, x: link.formula(y, x) * weight(y),
        grad_log_y=lambda y, x: link.grad_log_y(y, x) + _fd_grad_log(weight.eval, np.asarray(y, dtype=float)),
        in_support=link.in_support, section=link.section, window=link.window, mass="sigma-finite",
        heavy_tail=link.heavy_tail,
    )


def _orthogonality_residual(link1, link2, h3, specS, xs, ys, n_s: int = 16, h: float = 1e-4) -> float:
    worst = 0.0
    for xv, yv in zip(xs, ys):
        xa, ya = np.array([xv]), np.array([yv])
        lo = max(float(link1.window(xa)[0][0]), float(link2.window(ya)[0][0]))
        hi = min(float(link1.window(xa)[1][0]), float(link2.window(ya)[1][0]))
        lo, hi = (lo, hi) if np.isfinite(lo) and np.isfinite(hi) else (max(lo, -10.0), min(hi, 10.0))
        if hi <= lo:
            continue
        s = (lo + (hi - lo) * (np.arange(n_s) + 0.5) / n_s)[:, None]
        stencil = np.concatenate([s + k * h for k in (-2, -1, 0, 1, 2)], axis=1)[..., None]
        same1 = np.all(link1.in_support(xa, stencil) == link1.in_support(xa, stencil[:, :1]), axis=1)
        same2 = np.all(link2.in_support(ya, stencil) == link2.in_support(ya, stencil[:, :1]), axis=1)
        inside = specS.domain.distance_to_boundary(s) > 2 * h
        keep = same1 & same2 & inside
        if not np.any(keep):
            continue
        f = lambda p: link1.density(xa, p) / h3(p)
        g = lambda p: link2.density(ya, p) / h3(p)
        val = carre_du_champ(specS, f, g, s[keep], h=h)
        worst = max(worst, float(np.max(np.abs(val))))
    return worst


def combine_orthogonal(link1: LinkKernel, link2: LinkKernel, h3: Density, specS: DiffusionSpec,
                       specX: DiffusionSpec | None = None, specY: DiffusionSpec | None = None,
                       check_xy=None, tol: float = 1e-6, n: int = 64) -> CombinedLink:
    """Combine ``X <L1> S`` and ``Y <L2> S`` into a link from ``Z = (X, Y)`` to ``S``.

    Orthogonality of the two links under the carre-du-champ of ``S`` is
    checked first on ``check_xy`` pairs (stencils straddling a support edge
    are skipped).  ``specX``/``specY`` default to standard Brownian motions.
    """
    from .diffusion import brownian

    if link1.x_dim != 1 or link2.x_dim != 1 or link1.y_dim != 1 or link2.y_dim != 1:
        raise AlgebraError("combination is implemented for one-dimensional X, Y and S")
    specX = specX or brownian(1)
    specY = specY or brownian(1)
    if check_xy is None:
        g = np.linspace(-1.5, 1.5, 4)
        X, Y = np.meshgrid(g, g + 0.25, indexing="ij")
        check_xy = np.stack([X.ravel(), Y.ravel()], axis=1)
    check_xy = np.asarray(check_xy, dtype=float)
    res = _orthogonality_residual(link1, link2, h3, specS, check_xy[:, 0], check_xy[:, 1])
    if res > tol:
        raise AlgebraError(f"links are not orthogonal: max |Gamma| = {res:.3g}")

    t, w = gauss_legendre(n)

    def s_window(z):
        z = np.asarray(z, dtype=float)
        lo1, hi1 = link1.window(z[..., :1])
        lo2, hi2 = link2.window(z[..., 1:2])
        return np.maximum(lo1, lo2)[..., 0], np.minimum(hi1, hi2)[..., 0]

    def eta_eval(z):
        z = np.asarray(z, dtype=float)
        lo, hi = s_window(z)
        finite = np.isfinite(lo) & np.isfinite(hi)
        empty = hi <= lo
        c = np.where(finite, 0.5 * (lo + hi), 0.5 * (z[..., 0] + z[..., 1]))
        ua = np.where(finite, lo, np.arctan(lo - c))
        ub = np.where(finite, hi, np.arctan(hi - c))
        ub = np.where(empty, ua, ub)
        half = 0.5 * (ub - ua)
        u = ua[..., None] + half[..., None] * (t + 1.0)
        s = np.where(finite[..., None], u, c[..., None] + np.tan(u))
        jac = np.where(finite[..., None], 1.0, 1.0 / np.cos(u) ** 2)
        sp = s[..., None]
        vals = link1.density(z[..., None, :1], sp) * link2.density(z[..., None, 1:2], sp) / h3(sp)
        return np.sum(vals * jac * w, axis=-1) * half

    def grad_log_eta(z):
        return _fd_grad_log(eta_eval, np.asarray(z, dtype=float), rel=1e-6)

    eta = ScalarField(eta_eval, lambda z: grad_log_eta(z) * eta_eval(z)[..., None])

    def extra(z):
        z = np.asarray(z, dtype=float)
        g = grad_log_eta(z)
        return np.concatenate([
            np.einsum("...ij,...j->...i", specX.a(z[..., :1]), g[..., :1]),
            np.einsum("...ij,...j->...i", specY.a(z[..., 1:]), g[..., 1:]),
        ], axis=-1)

    base = product_spec(specX, specY)
    spec = product_spec(specX, specY, extra_drift=extra)

    def psi_formula(z, s):
        z = np.asarray(z, dtype=float)
        return link1.formula(z[..., :1], s) * link2.formula(z[..., 1:], s) / h3(s) / eta_eval(z)

    def psi_grad(z, s):
        z = np.asarray(z, dtype=float)
        g1 = link1.grad_log_y(z[..., :1], s)
        g2 = link2.grad_log_y(z[..., 1:], s)
        return np.concatenate([g1, g2], axis=-1) - grad_log_eta(z)

    def psi_support(z, s):
        z = np.asarray(z, dtype=float)
        return link1.in_support(z[..., :1], s) & link2.in_support(z[..., 1:], s)

    def psi_window(z):
        lo, hi = s_window(z)
        return lo[..., None], hi[..., None]

    psi = LinkKernel(
        f"psi({link1.name},{link2.name})", 2, 1, psi_formula, psi_grad, psi_support,
        section=lambda z: box(*[np.ravel(v) for v in psi_window(z)]), window=psi_window,
    )
    return CombinedLink(eta, psi, spec.drift, base, spec)
