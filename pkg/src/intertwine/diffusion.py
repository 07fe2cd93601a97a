"""Diffusion generators, their formal adjoints and the carre-du-champ.

A generator acts as ``A f = sum_i b_i d_i f + 1/2 sum_ij a_ij d_ij f``.  All
derivatives are taken numerically with second-order central differences so
coefficient fields can be arbitrary vectorized closures.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .domains import Domain, box, full_space, half_line, torus, weyl_chamber

__all__ = [
    "DiffusionSpec",
    "FiniteDifferenceError",
    "Neumann",
    "ScalarField",
    "apply_adjoint",
    "apply_generator",
    "carre_du_champ",
    "check_psd",
    "default_step",
    "brownian",
    "brownian_drift",
    "bessel",
    "circle_brownian",
    "dyson",
    "jacobi",
    "ornstein_uhlenbeck",
    "reflected_brownian",
    "squared_bessel",
]

Field = Callable[[np.ndarray], np.ndarray]


class FiniteDifferenceError(ValueError):
    """A stencil touched the boundary or produced a non-finite value."""


@dataclass(frozen=True)
class Neumann:
    """Reflecting boundary. ``U=None`` means normal reflection.

    ``U(q, n)`` returns the oblique direction at boundary points ``q`` whose
    inward unit normals are ``n``.
    """

    U: Callable | None = None


@dataclass(frozen=True)
class ScalarField:
    """A vectorized real function of a point, optionally with its gradient."""

    eval: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, x) -> np.ndarray:
        return self.eval(np.asarray(x, dtype=float))


@dataclass(frozen=True)
class DiffusionSpec:
    """Coefficients of a diffusion on a domain.

    ``drift`` maps ``(..., d)`` to ``(..., d)`` and ``diffusion`` maps
    ``(..., d)`` to ``(..., d, d)``.  ``constant_diffusion`` lets the SDE engine
    precompute the matrix square root once.
    """

    dim: int
    drift: Field
    diffusion: Field
    domain: Domain
    boundary: Neumann | None = None
    name: str = field(default="", compare=False)
    constant_diffusion: np.ndarray | None = field(default=None, compare=False)

    def b(self, x) -> np.ndarray:
        return np.asarray(self.drift(np.asarray(x, dtype=float)), dtype=float)

    def a(self, x) -> np.ndarray:
        return np.asarray(self.diffusion(np.asarray(x, dtype=float)), dtype=float)


def check_psd(spec: DiffusionSpec, points, floor: float = -1e-10) -> bool:
    """True if the diffusion matrix is symmetric PSD at every given point."""
    a = spec.a(np.atleast_2d(points))
    if not np.allclose(a, np.swapaxes(a, -1, -2), atol=1e-12):
        return False
    return bool(np.all(np.linalg.eigvalsh(a) >= floor))


def default_step(x: np.ndarray) -> np.ndarray:
    """Scale-aware step ``1e-3 (1 + |x|)`` per point."""
    return 1e-3 * (1.0 + np.linalg.norm(x, axis=-1))


def _prepare(spec: DiffusionSpec, x, h) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.dim:
        raise FiniteDifferenceError(f"point dimension {x.shape[-1]} != spec dimension {spec.dim}")
    h = default_step(x) if h is None else np.broadcast_to(np.asarray(h, dtype=float), x.shape[:-1])
    if np.any(h <= 0):
        raise FiniteDifferenceError("step size must be positive")
    dist = spec.domain.distance_to_boundary(x)
    if np.any(dist <= 2.0 * h):
        raise FiniteDifferenceError("point too close to the boundary for the stencil")
    return x, np.asarray(h)


def _derivatives(F: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: np.ndarray):
    """Central-difference value, gradient and Hessian of a stack of functions.

    ``F`` maps ``(..., d)`` to ``(..., k)``.  Returns arrays shaped
    ``(..., k)``, ``(..., k, d)`` and ``(..., k, d, d)``.
    """
    d = x.shape[-1]
    eye = np.eye(d)
    hh = h[..., None]

    def ev(p):
        v = np.asarray(F(p), dtype=float)
        if not np.all(np.isfinite(v)):
            raise FiniteDifferenceError("non-finite evaluation inside the stencil")
        return v

    f0 = ev(x)
    k = f0.shape[-1]
    grad = np.empty(f0.shape[:-1] + (k, d))
    hess = np.empty(f0.shape[:-1] + (k, d, d))
    h2 = (h * h)[..., None]
    for i in range(d):
        fp = ev(x + hh * eye[i])
        fm = ev(x - hh * eye[i])
        grad[..., i] = (fp - fm) / (2.0 * h[..., None])
        hess[..., i, i] = (fp - 2.0 * f0 + fm) / h2
    for i in range(d):
        for j in range(i + 1, d):
            fpp = ev(x + hh * (eye[i] + eye[j]))
            fpm = ev(x + hh * (eye[i] - eye[j]))
            fmp = ev(x + hh * (-eye[i] + eye[j]))
            fmm = ev(x - hh * (eye[i] + eye[j]))
            cross = (fpp - fpm - fmp + fmm) / (4.0 * h2)
            hess[..., i, j] = cross
            hess[..., j, i] = cross
    return f0, grad, hess


def apply_generator(spec: DiffusionSpec, f, x, h=None) -> np.ndarray:
    """``(A f)(x)`` by central differences; ``x`` may be a batch of points."""
    x, h = _prepare(spec, x, h)
    _, g, H = _derivatives(lambda p: np.asarray(f(p))[..., None], x, h)
    b = spec.b(x)
    a = spec.a(x)
    return np.sum(b * g[..., 0, :], axis=-1) + 0.5 * np.sum(a * H[..., 0, :, :], axis=(-1, -2))


def apply_adjoint(spec: DiffusionSpec, f, x, h=None) -> np.ndarray:
    """``(A* f)(x) = -sum d_i(b_i f) + 1/2 sum d_ij(a_ij f)`` by central differences."""
    x, h = _prepare(spec, x, h)
    d = spec.dim

    def products(p):
        fv = np.asarray(f(p), dtype=float)[..., None]
        bf = spec.b(p) * fv
        af = spec.a(p).reshape(p.shape[:-1] + (d * d,)) * fv
        return np.concatenate([bf, af], axis=-1)

    _, g, H = _derivatives(products, x, h)
    div = np.einsum("...ii->...", g[..., :d, :])
    Haf = H[..., d:, :, :].reshape(H.shape[:-3] + (d, d, d, d))
    second = np.einsum("...ijij->...", Haf)
    return -div + 0.5 * second


def carre_du_champ(spec: DiffusionSpec, f, g, x, h=None) -> np.ndarray:
    """``Gamma(f, g) = A(fg) - g A f - f A g``, evaluated as ``<grad f, a grad g>``.

    The two forms agree exactly (drift terms cancel); the gradient form keeps
    ``Gamma(f, f) >= 0`` whenever ``a`` is PSD.
    """
    x, h = _prepare(spec, x, h)
    _, gr, _ = _derivatives(lambda p: np.stack([np.asarray(f(p)), np.asarray(g(p))], axis=-1), x, h)
    a = spec.a(x)
    return np.einsum("...i,...ij,...j->...", gr[..., 0, :], a, gr[..., 1, :])


# -- catalog of generators -----------------------------------------------------


def _const(dim: int, value: float = 1.0) -> tuple[Field, np.ndarray]:
    m = value * np.eye(dim)
    return (lambda x: np.broadcast_to(m, np.shape(x)[:-1] + (dim, dim))), m


def _zero_drift(x):
    return np.zeros(np.shape(x))


def brownian(dim: int = 1) -> DiffusionSpec:
    diff, m = _const(dim)
    return DiffusionSpec(dim, _zero_drift, diff, full_space(dim), name=f"BM{dim}", constant_diffusion=m)


def brownian_drift(mu) -> DiffusionSpec:
    mu = np.atleast_1d(np.asarray(mu, dtype=float))
    dim = mu.size
    diff, m = _const(dim)
    return DiffusionSpec(
        dim,
        lambda x: np.broadcast_to(mu, np.shape(x)).copy(),
        diff,
        full_space(dim),
        name="BM+drift",
        constant_diffusion=m,
    )


def reflected_brownian(lo: float = 0.0, hi: float = np.inf) -> DiffusionSpec:
    diff, m = _const(1)
    return DiffusionSpec(1, _zero_drift, diff, box([lo], [hi]), Neumann(), name="RBM", constant_diffusion=m)


def circle_brownian(period: float = 2.0 * np.pi) -> DiffusionSpec:
    diff, m = _const(1)
    return DiffusionSpec(1, _zero_drift, diff, torus([period]), name="circleBM", constant_diffusion=m)


def ornstein_uhlenbeck(theta: float = 1.0) -> DiffusionSpec:
    diff, m = _const(1)
    return DiffusionSpec(1, lambda x: -theta * np.asarray(x), diff, full_space(1), name="OU", constant_diffusion=m)


def bessel(delta: float) -> DiffusionSpec:
    """Bessel process of dimension ``delta``: drift ``(delta-1)/(2x)``, unit noise."""
    diff, m = _const(1)
    return DiffusionSpec(
        1,
        lambda x: 0.5 * (delta - 1.0) / np.asarray(x),
        diff,
        half_line(0.0),
        name=f"Bessel({delta:g})",
        constant_diffusion=m,
    )


def squared_bessel(delta: float) -> DiffusionSpec:
    """Squared Bessel process: ``dX = delta dt + 2 sqrt(X) dW``."""
    return DiffusionSpec(
        1,
        lambda x: np.full(np.shape(x), float(delta)),
        lambda x: 4.0 * np.asarray(x)[..., None],
        half_line(0.0),
        name=f"BESQ({delta:g})",
    )


def jacobi() -> DiffusionSpec:
    """Jacobi diffusion on [-1, 1] with ``2 A u = -x u' + (1 - x^2) u''``.

    This is ``cos`` of a Brownian motion, so both ends reflect instantly.
    """
    return DiffusionSpec(
        1,
        lambda x: -0.5 * np.asarray(x),
        lambda x: (1.0 - np.asarray(x) ** 2)[..., None],
        box([-1.0], [1.0]),
        Neumann(),
        name="Jacobi",
    )


def dyson(n: int) -> DiffusionSpec:
    """Dyson Brownian motion (beta = 2) on the Weyl chamber."""

    def drift(x):
        x = np.asarray(x, dtype=float)
        diff = x[..., :, None] - x[..., None, :]
        with np.errstate(divide="ignore"):
            inv = np.where(np.eye(n, dtype=bool), 0.0, 1.0 / np.where(diff == 0, np.inf, diff))
        return inv.sum(axis=-1)

    diff, m = _const(n)
    return DiffusionSpec(n, drift, diff, weyl_chamber(n), name=f"Dyson({n})", constant_diffusion=m)
