"""Vectorized Gauss-Legendre rules used by the kernels and the algebra.

Every routine integrates many integrands at once: the leading axis of the
bounds indexes independent problems and the integrand receives the nodes as an
extra trailing axis.
"""
from __future__ import annotations

from functools import lru_cache
from itertools import product

import numpy as np

__all__ = ["composite_nodes", "gauss_legendre", "integrate_box", "integrate_interval", "tensor_nodes"]


@lru_cache(maxsize=64)
def gauss_legendre(n: int) -> tuple[np.ndarray, np.ndarray]:
    t, w = np.polynomial.legendre.leggauss(n)
    t.setflags(write=False)
    w.setflags(write=False)
    return t, w


def composite_nodes(lo, hi, panels: int, order: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Composite Gauss-Legendre nodes and weights on ``[lo, hi]``.

    ``lo``/``hi`` may be arrays of shape ``(m,)``; the result has shape
    ``(m, panels * order)``.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    t, w = gauss_legendre(order)
    edges = lo[..., None] + (hi - lo)[..., None] * np.linspace(0.0, 1.0, panels + 1)
    a = edges[..., :-1, None]
    half = 0.5 * (edges[..., 1:, None] - a)
    x = a + half * (t + 1.0)
    wt = half * w
    shape = lo.shape + (panels * order,)
    return x.reshape(shape), wt.reshape(shape)


def integrate_interval(func, lo, hi, n: int = 128, center=None, scale: float = 1.0) -> np.ndarray:
    """Integrate ``func(x)`` over ``[lo, hi]`` for a batch of intervals.

    ``func`` receives nodes of shape ``(m, n)`` and returns values of the same
    shape.  When ``center`` is given the substitution ``x = center + scale *
    tan(theta)`` is used, which handles infinite or very wide intervals and
    makes Cauchy-type tails exact.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    t, w = gauss_legendre(n)
    if center is None:
        half = 0.5 * (hi - lo)[:, None]
        x = lo[:, None] + half * (t + 1.0)
        return np.sum(np.asarray(func(x)) * half * w, axis=-1)
    center = np.broadcast_to(np.asarray(center, dtype=float), lo.shape)
    a = np.arctan((lo - center) / scale)
    b = np.arctan((hi - center) / scale)
    half = 0.5 * (b - a)[:, None]
    th = a[:, None] + half * (t + 1.0)
    x = center[:, None] + scale * np.tan(th)
    jac = scale / np.cos(th) ** 2
    return np.sum(np.asarray(func(x)) * jac * half * w, axis=-1)


@lru_cache(maxsize=32)
def tensor_nodes(dim: int, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Legendre nodes on ``[-1, 1]^dim``."""
    t, w = gauss_legendre(n)
    pts = np.array(list(product(t, repeat=dim)))
    wts = np.prod(np.array(list(product(w, repeat=dim))), axis=1)
    pts.setflags(write=False)
    wts.setflags(write=False)
    return pts, wts


def integrate_box(func, lo, hi, n: int = 32) -> float:
    """Tensor Gauss-Legendre integral of ``func(points)`` over one box."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    pts, wts = tensor_nodes(lo.size, n)
    half = 0.5 * (hi - lo)
    x = lo + half * (pts + 1.0)
    return float(np.sum(np.asarray(func(x)) * wts) * np.prod(half))
