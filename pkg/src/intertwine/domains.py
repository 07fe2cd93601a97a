"""State-space domains: full space, boxes, polytopes and tori.

Points are numpy arrays whose last axis is the coordinate axis, so every
method accepts a single point of shape ``(d,)`` or a batch ``(..., d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Domain",
    "DomainError",
    "box",
    "full_space",
    "half_line",
    "halfspace",
    "polytope",
    "torus",
    "weyl_chamber",
]


class DomainError(ValueError):
    """Raised for malformed domains or points that cannot be handled."""


@dataclass(frozen=True)
class Domain:
    """A closed subset of R^d described by its kind and parameters.

    ``box`` uses ``lo``/``hi`` (entries may be infinite), ``polytope`` and
    ``halfspace`` use rows of ``A x <= c``, ``torus`` uses ``periods``.
    """

    kind: str
    dim: int
    lo: np.ndarray | None = None
    hi: np.ndarray | None = None
    A: np.ndarray | None = None
    c: np.ndarray | None = None
    periods: np.ndarray | None = None
    label: str = field(default="", compare=False)

    # -- queries -----------------------------------------------------------
    def contains(self, x, tol: float = 0.0) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.kind in ("full", "torus"):
            return np.all(np.isfinite(x), axis=-1)
        if self.kind == "box":
            return np.all((x >= self.lo - tol) & (x <= self.hi + tol), axis=-1)
        return np.all(x @ self.A.T <= self.c + tol, axis=-1)

    def distance_to_boundary(self, x) -> np.ndarray:
        """Signed distance to the boundary, positive inside, ``inf`` without boundary."""
        x = np.asarray(x, dtype=float)
        if self.kind in ("full", "torus"):
            return np.full(x.shape[:-1], np.inf)
        if self.kind == "box":
            with np.errstate(invalid="ignore"):
                d = np.minimum(x - self.lo, self.hi - x)
            return np.min(d, axis=-1)
        norms = np.linalg.norm(self.A, axis=1)
        return np.min((self.c - x @ self.A.T) / norms, axis=-1)

    def project_to_boundary(self, point) -> tuple[np.ndarray, np.ndarray]:
        """Nearest boundary point of a single point and the inward unit normal there."""
        p = np.asarray(point, dtype=float)
        if p.ndim != 1 or p.shape[0] != self.dim:
            raise DomainError(f"expected a point of dimension {self.dim}")
        if self.kind in ("full", "torus"):
            raise DomainError(f"{self.kind} domain has no boundary")
        A, c = self._rows()
        norms = np.linalg.norm(A, axis=1)
        slack = (c - A @ p) / norms
        if np.all(slack >= 0):
            i = int(np.argmin(slack))
            q = p + slack[i] * A[i] / norms[i]
        else:
            q = self._closest_point(p)
            slack_q = (c - A @ q) / norms
            i = int(np.argmin(slack_q))
        # snap onto the active face so contains() holds to rounding
        q = q + min(0.0, (c[i] - A[i] @ q) / norms[i]) * A[i] / norms[i]
        return q, -A[i] / norms[i]

    # -- maps --------------------------------------------------------------
    def wrap(self, x) -> np.ndarray:
        if self.kind != "torus":
            return np.asarray(x, dtype=float)
        return np.mod(x, self.periods)

    def reflect(self, x, U=None, max_iter: int = 32) -> np.ndarray:
        """Map points that overshot the domain back inside.

        With ``U=None`` the overshoot is mirrored across the violated face.
        Otherwise ``U(q, n)`` gives the oblique direction at boundary point ``q``
        with inward normal ``n`` and the overshoot is pushed along it.
        """
        x = np.array(x, dtype=float, copy=True)
        if self.kind == "full":
            return x
        if self.kind == "torus":
            return self.wrap(x)
        if self.kind == "box" and U is None:
            return _fold_box(x, self.lo, self.hi)
        A, c = self._rows()
        norms = np.linalg.norm(A, axis=1)
        An = A / norms[:, None]
        cn = c / norms
        flat = x.reshape(-1, self.dim)
        for _ in range(max_iter):
            viol = flat @ An.T - cn
            worst = np.argmax(viol, axis=1)
            over = viol[np.arange(len(flat)), worst]
            bad = over > 0
            if not np.any(bad):
                return flat.reshape(x.shape)
            n_in = -An[worst[bad]]
            if U is None:
                flat[bad] += 2.0 * over[bad, None] * n_in
            else:
                q = flat[bad] + over[bad, None] * n_in
                u = np.asarray(U(q, n_in), dtype=float)
                un = np.sum(u * n_in, axis=-1)
                if np.any(un <= 1e-12):
                    raise DomainError("oblique field is tangent or points outward")
                flat[bad] += (2.0 * over[bad] / un)[:, None] * u
        raise DomainError(f"reflection did not converge after {max_iter} iterations")

    # -- helpers -----------------------------------------------------------
    def _rows(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "box":
            rows, rhs = [], []
            for i in range(self.dim):
                e = np.zeros(self.dim)
                e[i] = 1.0
                if np.isfinite(self.hi[i]):
                    rows.append(e)
                    rhs.append(self.hi[i])
                if np.isfinite(self.lo[i]):
                    rows.append(-e)
                    rhs.append(-self.lo[i])
            if not rows:
                raise DomainError("box without finite faces has no boundary")
            return np.array(rows), np.array(rhs)
        return self.A, self.c

    def _closest_point(self, p: np.ndarray, iters: int = 2000) -> np.ndarray:
        if self.kind == "box":
            return np.clip(p, self.lo, self.hi)
        # Dykstra's alternating projections onto the half-spaces
        A, c = self._rows()
        m = len(c)
        y = p.copy()
        corr = np.zeros((m, self.dim))
        for _ in range(iters):
            prev = y.copy()
            for i in range(m):
                z = y + corr[i]
                s = A[i] @ z - c[i]
                proj = z - max(s, 0.0) * A[i] / (A[i] @ A[i])
                corr[i] = z - proj
                y = proj
            if np.max(np.abs(y - prev)) < 1e-15:
                break
        return y


def _fold_box(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    lo = np.broadcast_to(lo, x.shape)
    hi = np.broadcast_to(hi, x.shape)
    out = x.copy()
    both = np.isfinite(lo) & np.isfinite(hi)
    if np.any(both):
        width = (hi - lo)[both]
        r = np.mod(x[both] - lo[both], 2.0 * width)
        out[both] = lo[both] + np.where(r > width, 2.0 * width - r, r)
    only_lo = np.isfinite(lo) & ~np.isfinite(hi)
    out[only_lo] = lo[only_lo] + np.abs(x[only_lo] - lo[only_lo])
    only_hi = ~np.isfinite(lo) & np.isfinite(hi)
    out[only_hi] = hi[only_hi] - np.abs(hi[only_hi] - x[only_hi])
    return out


def full_space(dim: int) -> Domain:
    return Domain("full", dim, label=f"R^{dim}")


def box(lo, hi) -> Domain:
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if lo.shape != hi.shape or np.any(lo >= hi):
        raise DomainError("box needs lo < hi componentwise")
    return Domain("box", lo.size, lo=lo, hi=hi, label="box")


def half_line(start: float = 0.0) -> Domain:
    return box([start], [np.inf])


def halfspace(normal, offset: float) -> Domain:
    """The set ``{x : <normal, x> <= offset}``."""
    A = np.atleast_2d(np.asarray(normal, dtype=float))
    return Domain("halfspace", A.shape[1], A=A, c=np.array([float(offset)]), label="halfspace")


def polytope(A, c) -> Domain:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    if A.shape[0] != c.shape[0]:
        raise DomainError("polytope rows and right-hand sides differ in length")
    return Domain("polytope", A.shape[1], A=A, c=c, label="polytope")


def torus(periods) -> Domain:
    periods = np.atleast_1d(np.asarray(periods, dtype=float))
    return Domain("torus", periods.size, periods=periods, label="torus")


def weyl_chamber(n: int) -> Domain:
    """Ordered configurations ``x_1 <= ... <= x_n``."""
    if n < 2:
        return full_space(max(n, 1))
    A = np.zeros((n - 1, n))
    for i in range(n - 1):
        A[i, i], A[i, i + 1] = 1.0, -1.0
    return Domain("polytope", n, A=A, c=np.zeros(n - 1), label=f"W^{n}")
