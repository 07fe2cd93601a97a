"""Simulation of intertwined pairs ``Z = (Z1, Z2)`` and of the reflected systems.

The generic engine is Euler-Maruyama with a per-path reject-and-halve
substep: a step that leaves the domain (or the link support, or produces a
non-finite drift) is discarded and replaced by two half steps with fresh
increments.  Neumann faces are handled by mirror reflection.

Paths are simulated in blocks of :data:`intertwine.rng.BLOCK`; each block
owns a counter-based stream so results do not depend on how blocks are
distributed over threads.
"""
from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from math import sqrt
from typing import Callable

import numpy as np

from .diffusion import DiffusionSpec
from .domains import Domain
from .kernels import LinkKernel, _whittaker_dy, sampler_for
from .rng import RngStreams, blocks

__all__ = [
    "CoupledSystem",
    "PathEnsemble",
    "SimulationError",
    "build_system",
    "load_ensemble",
    "pitman_2m_minus_b",
    "reflect_fixed",
    "simulate",
    "simulate_interlaced",
    "simulate_reflected_pair",
    "simulate_whittaker",
]

MAGIC = b"ITWE"
VERSION = 1
GROUP = 16  # blocks stepped together
MAX_HALVINGS = 48
DRIFT_GUARD = 3.0
TAME_DEPTH = 8  # below dt / 2**8 the drift is tamed instead of rejected


class SimulationError(RuntimeError):
    """A path left its domain, or a guard was triggered."""


# -- ensembles ------------------------------------------------------------------


@dataclass
class PathEnsemble:
    """Recorded states ``paths[path, time, coord]`` on a uniform time grid."""

    times: np.ndarray
    paths: np.ndarray
    seed: int
    dt: float
    x_dim: int
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.paths.shape[0]

    @property
    def dim(self) -> int:
        return self.paths.shape[2]

    def index(self, t: float) -> int:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, abs(t)):
            raise ValueError(f"t={t} is not on the ensemble grid")
        return i

    def at(self, t: float) -> np.ndarray:
        return self.paths[:, self.index(t), :]

    def x_at(self, t: float) -> np.ndarray:
        return self.at(t)[:, :self.x_dim]

    def y_at(self, t: float) -> np.ndarray:
        return self.at(t)[:, self.x_dim:]

    def save(self, path) -> None:
        """Write the ``ITWE`` columnar binary file."""
        meta = json.dumps(self.meta, sort_keys=True, default=str).encode()
        n, m, d = self.paths.shape
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IIIIIQdI", VERSION, n, m, d, self.x_dim, self.seed, self.dt, len(meta)))
            fh.write(meta)
            fh.write(np.ascontiguousarray(self.times, dtype="<f8").tobytes())
            # columnar: one coordinate at a time, then time, then path
            fh.write(np.ascontiguousarray(np.transpose(self.paths, (2, 1, 0)), dtype="<f8").tobytes())

    def to_csv(self, path, max_paths: int = 1000) -> None:
        n = min(self.n_paths, max_paths)
        cols = ["path", "t"] + [f"z{j}" for j in range(self.dim)]
        rows = []
        for i in range(n):
            for k, t in enumerate(self.times):
                rows.append([i, t, *self.paths[i, k]])
        np.savetxt(path, np.array(rows).reshape(-1, len(cols)), delimiter=",", header=",".join(cols),
                   comments="", fmt="%.17g")


def load_ensemble(path) -> PathEnsemble:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError("not an ITWE file")
        version, n, m, d, xd, seed, dt, lm = struct.unpack("<IIIIIQdI", fh.read(struct.calcsize("<IIIIIQdI")))
        if version != VERSION:
            raise ValueError(f"unsupported ITWE version {version}")
        meta = json.loads(fh.read(lm).decode())
        times = np.frombuffer(fh.read(8 * m), dtype="<f8").copy()
        data = np.frombuffer(fh.read(8 * n * m * d), dtype="<f8").reshape(d, m, n)
    return PathEnsemble(times, np.transpose(data, (2, 1, 0)).copy(), seed, dt, xd, meta)


# -- coupled systems ---------------------------------------------------------------


def reflect_fixed(state, domain: Domain, U=None) -> np.ndarray:
    """Mirror (or oblique, along ``U``) reflection of states that overshot ``domain``."""
    return domain.reflect(state, U)


@dataclass(frozen=True)
class CoupledSystem:
    """``Z = (Z1, Z2)`` on ``X x Y`` with drift ``(b(x), gamma(y) + rho(y) grad_y log Lambda(y, x))``."""

    specX: DiffusionSpec
    specY: DiffusionSpec
    link: LinkKernel | None
    mutate: bool = False

    @property
    def x_dim(self) -> int:
        return self.specX.dim

    @property
    def dim(self) -> int:
        return self.specX.dim + self.specY.dim

    def z_drift(self, x, y) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        gy = self.specY.b(y)
        if self.link is not None:
            term = np.einsum("...ij,...j->...i", self.specY.a(y), self.link.grad_log_y(y, x))
            gy = gy - term if self.mutate else gy + term
        return np.concatenate([np.broadcast_to(self.specX.b(x), gy.shape[:-1] + (self.x_dim,)), gy], axis=-1)

    def initial_sampler(self, y0) -> Callable:
        """Draw ``Z2(0)`` (a point or ``y0(rng, m)``) then ``Z1(0)`` from the link."""
        draw_x = sampler_for(self.link)

        def init(rng, m):
            y = y0(rng, m) if callable(y0) else np.broadcast_to(np.asarray(y0, dtype=float), (m, self.specY.dim)).copy()
            x = draw_x.draw(y, rng)
            return np.concatenate([np.reshape(x, (m, self.x_dim)), y], axis=1)

        return init


def build_system(specX: DiffusionSpec, specY: DiffusionSpec, link: LinkKernel | None, mutate: bool = False) -> CoupledSystem:
    if link is not None and (link.x_dim != specX.dim or link.y_dim != specY.dim):
        raise ValueError(f"link dims ({link.y_dim}, {link.x_dim}) do not match Y/X dims ({specY.dim}, {specX.dim})")
    return CoupledSystem(specX, specY, link, mutate)


def _as_system(obj) -> CoupledSystem:
    if isinstance(obj, CoupledSystem):
        return obj
    if isinstance(obj, DiffusionSpec):
        # a single diffusion is a coupled system with an empty first factor
        return CoupledSystem(_EMPTY, obj, None)
    raise TypeError("expected a CoupledSystem or a DiffusionSpec")


_EMPTY = DiffusionSpec(0, lambda x: np.zeros(np.shape(x)), lambda x: np.zeros(np.shape(x) + (0,)),
                       Domain("full", 0), name="empty")


def _sqrt_factory(spec: DiffusionSpec) -> Callable[[np.ndarray], np.ndarray]:
    d = spec.dim
    if spec.constant_diffusion is not None:
        w, v = np.linalg.eigh(np.asarray(spec.constant_diffusion, dtype=float))
        root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
        if np.allclose(root, np.eye(d)):
            return lambda x, dW: dW
        return lambda x, dW: dW @ root.T

    def apply(x, dW):
        a = spec.a(x)
        if d == 1:
            return np.sqrt(np.clip(a[:, 0, 0], 0.0, None))[:, None] * dW
        w, v = np.linalg.eigh(a)
        root = np.einsum("...ij,...j,...kj->...ik", v, np.sqrt(np.clip(w, 0.0, None)), v)
        return np.einsum("...ij,...j->...i", root, dW)

    return apply


def _boundary_fix(spec: DiffusionSpec, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Apply wrap/Neumann reflection; return the state and an ok mask."""
    dom = spec.domain
    if dom.kind == "full" or spec.dim == 0:
        return z, np.all(np.isfinite(z), axis=-1)
    if dom.kind == "torus":
        return dom.wrap(z), np.all(np.isfinite(z), axis=-1)
    if spec.boundary is not None:
        z = reflect_fixed(z, dom, spec.boundary.U)
        return z, dom.contains(z, tol=1e-12)
    with np.errstate(invalid="ignore"):
        return z, dom.distance_to_boundary(z) > 0


class _Stepper:
    def __init__(self, system: CoupledSystem, streams: list[np.random.Generator], block_of: np.ndarray):
        self.sys = system
        self.streams = streams
        self.block_of = block_of
        self.sx = _sqrt_factory(system.specX) if system.x_dim else None
        self.sy = _sqrt_factory(system.specY)
        self.halvings = 0

    def normals(self, idx: np.ndarray) -> np.ndarray:
        out = np.empty((len(idx), self.sys.dim))
        b = self.block_of[idx]
        for k in np.unique(b):
            sel = b == k
            out[sel] = self.streams[k].standard_normal((int(sel.sum()), self.sys.dim))
        return out

    def try_step(self, z: np.ndarray, h: float, dW: np.ndarray, tame: bool = False) -> tuple[np.ndarray, np.ndarray]:
        s = self.sys
        xd = s.x_dim
        x, y = z[:, :xd], z[:, xd:]
        with np.errstate(all="ignore"):
            drift = s.z_drift(x, y)
            ok = np.all(np.isfinite(drift), axis=-1)
            drift = np.where(ok[:, None], drift, 0.0)
            size = np.sqrt(np.sum(drift * drift, axis=-1) * h)
            if tame:
                drift = drift / (1.0 + size)[:, None]
            else:
                # a drift displacement beyond the noise scale means a nearby singularity
                ok &= size <= DRIFT_GUARD
            xn = x + drift[:, :xd] * h + (self.sx(x, dW[:, :xd]) if xd else 0.0)
            yn = y + drift[:, xd:] * h + self.sy(y, dW[:, xd:])
        if xd:
            xn, okx = _boundary_fix(s.specX, xn)
            ok &= okx
        if s.link is not None and s.link.reflect_y is not None and xd:
            # moving face of the support: Y is pushed off X, X is left alone
            yn = s.link.reflect_y(yn, xn)
        yn, oky = _boundary_fix(s.specY, yn)
        ok &= oky
        if s.link is not None and not s.link.periodic and np.any(ok):
            sup = np.zeros(len(z), dtype=bool)
            sup[ok] = np.asarray(s.link.in_support(yn[ok], xn[ok]), dtype=bool)
            ok &= sup
        return np.concatenate([xn, yn], axis=1), ok

    def advance(self, idx: np.ndarray, z: np.ndarray, h: float, dW: np.ndarray, depth: int, t: float) -> np.ndarray:
        zn, ok = self.try_step(z, h, dW, tame=depth >= TAME_DEPTH)
        if np.all(ok):
            return zn
        bad = np.nonzero(~ok)[0]
        if depth >= MAX_HALVINGS:
            raise SimulationError(f"path {int(idx[bad[0]])} left the domain at t={t:.6g} after {depth} halvings")
        self.halvings += len(bad)
        # fresh increments: conditioning on the rejected increment would force the crossing
        q = sqrt(0.5 * h)
        mid = self.advance(idx[bad], z[bad], 0.5 * h, q * self.normals(idx[bad]), depth + 1, t)
        zn[bad] = self.advance(idx[bad], mid, 0.5 * h, q * self.normals(idx[bad]), depth + 1, t + 0.5 * h)
        return zn


def _record_stride(dt: float, T: float, record_every: float | None) -> tuple[int, int]:
    n_steps = int(round(T / dt))
    if abs(n_steps * dt - T) > 1e-9 * T:
        raise ValueError("T must be a multiple of dt")
    if record_every is None:
        stride = max(1, n_steps // 20)
        while n_steps % stride:
            stride -= 1
    else:
        stride = int(round(record_every / dt))
        if stride < 1 or n_steps % stride:
            raise ValueError("record_every must be a positive multiple of dt dividing T")
    return n_steps, stride


def _init_state(init, rng, m: int, dim: int) -> np.ndarray:
    if callable(init):
        z = np.asarray(init(rng, m), dtype=float)
    else:
        z = np.asarray(init, dtype=float)
        z = np.broadcast_to(z, (m, dim)).copy() if z.ndim <= 1 else z
    if z.shape != (m, dim):
        raise ValueError(f"initial state has shape {z.shape}, expected {(m, dim)}")
    return z


def _run_groups(n_paths: int, work: Callable[[list[tuple[int, int, int]]], np.ndarray], workers: int) -> list[np.ndarray]:
    all_blocks = list(blocks(n_paths))
    groups = [all_blocks[i:i + GROUP] for i in range(0, len(all_blocks), GROUP)]
    if workers > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(work, groups))
    return [work(g) for g in groups]


def simulate(system, init, dt: float, T: float, n_paths: int, seed: int, record_every: float | None = None,
             workers: int = 1, check: bool = False) -> PathEnsemble:
    """Euler-Maruyama ensemble of a coupled system (or of a single diffusion).

    ``init`` is a state, an ``(n_paths, dim)`` array or ``init(rng, m)``.  The
    first ``specX.dim`` coordinates are ``Z1``.
    """
    if dt <= 0 or T < dt:
        raise ValueError("need dt > 0 and T >= dt")
    sys_ = _as_system(system)
    n_steps, stride = _record_stride(dt, T, record_every)
    streams = RngStreams(seed)
    dim = sys_.dim
    init_arr = None if callable(init) else np.asarray(init, dtype=float)
    stats = {"halvings": 0}

    def work(group):
        gens = [streams.substream(k) for k, _, _ in group]
        starts = [a for _, a, _ in group]
        parts = []
        for g, (_, a, b) in zip(gens, group):
            if init_arr is not None and init_arr.ndim == 2:
                parts.append(init_arr[a:b].copy())
            else:
                parts.append(_init_state(init, g, b - a, dim))
        z = np.concatenate(parts, axis=0)
        sizes = [b - a for _, a, b in group]
        block_of = np.repeat(np.arange(len(group)), sizes)
        stepper = _Stepper(sys_, gens, block_of)
        idx = np.arange(len(z))
        out = np.empty((len(z), n_steps // stride + 1, dim))
        out[:, 0] = z
        sq = sqrt(dt)
        for step in range(1, n_steps + 1):
            dW = np.concatenate([g.standard_normal((s, dim)) for g, s in zip(gens, sizes)], axis=0) * sq
            z = stepper.advance(idx, z, dt, dW, 0, (step - 1) * dt)
            if check:
                _assert_inside(sys_, z, step * dt, starts[0])
            if step % stride == 0:
                out[:, step // stride] = z
        stats["halvings"] += stepper.halvings
        return out

    paths = np.concatenate(_run_groups(n_paths, work, workers), axis=0)
    times = dt * stride * np.arange(n_steps // stride + 1)
    name = getattr(sys_.link, "name", None) or sys_.specY.name
    return PathEnsemble(times, paths, seed, dt, sys_.x_dim,
                        {"scheme": "euler-maruyama", "system": name, "mutate": sys_.mutate, "T": T,
                         "halvings": stats["halvings"]})


def _assert_inside(sys_: CoupledSystem, z: np.ndarray, t: float, offset: int) -> None:
    for spec, part in ((sys_.specX, z[:, :sys_.x_dim]), (sys_.specY, z[:, sys_.x_dim:])):
        if spec.dim and not np.all(spec.domain.contains(spec.domain.wrap(part), tol=1e-12)):
            i = int(np.argmin(spec.domain.contains(part, tol=1e-12)))
            raise SimulationError(f"path {offset + i} outside {spec.domain.label} at t={t:.6g}")


# -- reflected and interlaced systems -------------------------------------------------------


def _level_slices(N: int) -> list[slice]:
    out, start = [], 0
    for k in range(1, N + 1):
        out.append(slice(start, start + k))
        start += k
    return out


def _gue_corners(N: int, t: float, rng: np.random.Generator, m: int) -> np.ndarray:
    """Eigenvalues of the leading minors of a GUE matrix with entry variance ``t``."""
    re = rng.standard_normal((m, N, N))
    im = rng.standard_normal((m, N, N))
    H = np.triu(re, 1) + 1j * np.triu(im, 1)
    H = (H + np.conj(np.swapaxes(H, 1, 2))) * sqrt(t / 2.0)
    diag = rng.standard_normal((m, N)) * sqrt(t)
    H[:, np.arange(N), np.arange(N)] = diag
    levels = [np.linalg.eigvalsh(H[:, :k, :k]) for k in range(1, N + 1)]
    return np.concatenate(levels, axis=1)


def _reflect_between(v: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    v = np.where(v < lo, 2.0 * lo - v, v)
    v = np.where(v > hi, 2.0 * hi - v, v)
    return np.clip(v, lo, hi)


def simulate_interlaced(N: int, dt: float, T: float, n_paths: int, seed: int, entrance: str = "zero-start",
                        t0: float = 1e-2, record_every: float | None = None, workers: int = 1) -> PathEnsemble:
    """Warren's interlaced Brownian motions on the Gelfand-Tsetlin cone.

    Level 1 is free; each coordinate of level ``k`` reflects off its two
    neighbours at level ``k-1``, lower levels being updated first.  The
    ``zero-start`` entrance starts at time ``t0`` from the exact GUE-corners
    law (skipped for ``N = 1``).
    """
    if not 1 <= N <= 6:
        raise ValueError("N must be between 1 and 6")
    if entrance not in ("zero-start", "gue-corner"):
        raise ValueError("entrance must be 'zero-start' or 'gue-corner'")
    start_t = 0.0 if N == 1 else t0
    if T <= start_t:
        raise ValueError("T must exceed the entrance time")
    n_steps, stride = _record_stride(dt, T - start_t, record_every)
    dim = N * (N + 1) // 2
    lv = _level_slices(N)
    streams = RngStreams(seed)

    def work(group):
        gens = [streams.substream(k) for k, _, _ in group]
        sizes = [b - a for _, a, b in group]
        if N == 1:
            z = np.zeros((sum(sizes), 1))
        else:
            z = np.concatenate([_gue_corners(N, start_t, g, s) for g, s in zip(gens, sizes)], axis=0)
        out = np.empty((len(z), n_steps // stride + 1, dim))
        out[:, 0] = z
        sq = sqrt(dt)
        for step in range(1, n_steps + 1):
            dW = np.concatenate([g.standard_normal((s, dim)) for g, s in zip(gens, sizes)], axis=0) * sq
            z = z + dW
            for k in range(1, N):
                below = z[:, lv[k - 1]]
                lo = np.concatenate([np.full((len(z), 1), -np.inf), below], axis=1)
                hi = np.concatenate([below, np.full((len(z), 1), np.inf)], axis=1)
                z[:, lv[k]] = _reflect_between(z[:, lv[k]], lo, hi)
            if N > 1:
                _check_interlacing(z, lv, step)
            if step % stride == 0:
                out[:, step // stride] = z
        return out

    paths = np.concatenate(_run_groups(n_paths, work, workers), axis=0)
    times = start_t + dt * stride * np.arange(n_steps // stride + 1)
    return PathEnsemble(times, paths, seed, dt, dim - N,
                        {"scheme": "interlaced", "N": N, "entrance": entrance, "t0": start_t, "T": T})


def _check_interlacing(z: np.ndarray, lv: list[slice], step: int) -> None:
    for k in range(1, len(lv)):
        below, up = z[:, lv[k - 1]], z[:, lv[k]]
        if np.any(up[:, :-1] > below) or np.any(up[:, 1:] < below):
            raise SimulationError(f"interlacing violated at step {step}")


def simulate_reflected_pair(init_gap_sampler: Callable, dt: float, T: float, n_paths: int, seed: int,
                            z1_start: float = 0.0, record_every: float | None = None, workers: int = 1) -> PathEnsemble:
    """``Z1`` free Brownian motion and ``Z2`` reflected on it.

    The gap ``Z2 - Z1`` is Brownian with variance ``2t`` reflected at 0; each
    step samples the bridge minimum so the reflection is exact at grid times.
    A nonpositive initial gap gives the mirrored variant (``Z2`` below).
    """
    n_steps, stride = _record_stride(dt, T, record_every)
    streams = RngStreams(seed)

    def work(group):
        gens = [streams.substream(k) for k, _, _ in group]
        sizes = [b - a for _, a, b in group]
        gap = np.concatenate([np.asarray(init_gap_sampler(g, s), dtype=float).reshape(s) for g, s in zip(gens, sizes)])
        sign = np.where(gap < 0, -1.0, 1.0)
        g = np.abs(gap)
        z1 = np.full(len(g), float(z1_start))
        out = np.empty((len(g), n_steps // stride + 1, 2))
        out[:, 0, 0], out[:, 0, 1] = z1, z1 + sign * g
        sq = sqrt(dt)
        for step in range(1, n_steps + 1):
            nrm = np.concatenate([r.standard_normal((s, 2)) for r, s in zip(gens, sizes)], axis=0) * sq
            u = np.concatenate([r.random(s) for r, s in zip(gens, sizes)])
            dB, dW = nrm[:, 0], nrm[:, 1]
            dU = sign * (dW - dB)
            low = 0.5 * (dU - np.sqrt(dU * dU - 4.0 * dt * np.log1p(-u)))
            g = np.maximum(g + dU, dU - low)
            z1 = z1 + dB
            if step % stride == 0:
                out[:, step // stride, 0] = z1
                out[:, step // stride, 1] = z1 + sign * g
        return out

    paths = np.concatenate(_run_groups(n_paths, work, workers), axis=0)
    times = dt * stride * np.arange(n_steps // stride + 1)
    return PathEnsemble(times, paths, seed, dt, 1, {"scheme": "reflected-pair", "T": T})


def pitman_2m_minus_b(dt: float, T: float, n_paths: int, seed: int, record_every: float | None = None,
                      workers: int = 1) -> PathEnsemble:
    """``X = M - B`` (reflected BM) and ``Y = 2M - B`` (Bessel(3)) with exact grid maxima.

    Per step the maximum of the Brownian bridge is sampled, so ``(B, M)`` has
    its exact joint law at every grid time.
    """
    n_steps, stride = _record_stride(dt, T, record_every)
    streams = RngStreams(seed)

    def work(group):
        gens = [streams.substream(k) for k, _, _ in group]
        sizes = [b - a for _, a, b in group]
        n = sum(sizes)
        B = np.zeros(n)
        M = np.zeros(n)
        out = np.zeros((n, n_steps // stride + 1, 2))
        sq = sqrt(dt)
        for step in range(1, n_steps + 1):
            dB = np.concatenate([r.standard_normal(s) for r, s in zip(gens, sizes)]) * sq
            u = np.concatenate([r.random(s) for r, s in zip(gens, sizes)])
            top = B + 0.5 * (dB + np.sqrt(dB * dB - 2.0 * dt * np.log1p(-u)))
            B = B + dB
            M = np.maximum(M, top)
            if step % stride == 0:
                out[:, step // stride, 0] = M - B
                out[:, step // stride, 1] = 2.0 * M - B
        return out

    paths = np.concatenate(_run_groups(n_paths, work, workers), axis=0)
    times = dt * stride * np.arange(n_steps // stride + 1)
    return PathEnsemble(times, paths, seed, dt, 1, {"scheme": "pitman-2M-B", "T": T})


def simulate_whittaker(N: int, a, dt: float, T: float, n_paths: int, seed: int, init=None,
                       record_every: float | None = None, clip: float = 1e6, workers: int = 1) -> PathEnsemble:
    """The triangular Whittaker system, levels stored bottom-up.

    Exponential drifts are clipped at ``clip``; more than 0.1% clipped
    steps raises, since it means ``dt`` is too large.
    """
    if N not in (2, 3):
        raise ValueError("N must be 2 or 3")
    a = np.asarray(a, dtype=float)
    if a.shape != (N,):
        raise ValueError("a must have length N")
    dim = N * (N + 1) // 2
    lv = _level_slices(N)
    n_steps, stride = _record_stride(dt, T, record_every)
    streams = RngStreams(seed)
    init = np.zeros(dim) if init is None else init
    clipped = [0]

    def drift(z):
        out = np.empty_like(z)
        out[:, 0] = a[0]
        for k in range(2, N + 1):
            out[:, lv[k - 1]] = _whittaker_dy(k, a[:k], z[:, lv[k - 1]], z[:, lv[k - 2]])
        return out

    def work(group):
        gens = [streams.substream(k) for k, _, _ in group]
        sizes = [b - a_ for _, a_, b in group]
        z = np.concatenate([_init_state(init, g, s, dim) for g, s in zip(gens, sizes)], axis=0)
        out = np.empty((len(z), n_steps // stride + 1, dim))
        out[:, 0] = z
        sq = sqrt(dt)
        n_clip = 0
        for step in range(1, n_steps + 1):
            dW = np.concatenate([g.standard_normal((s, dim)) for g, s in zip(gens, sizes)], axis=0) * sq
            with np.errstate(over="ignore"):
                b = drift(z)
            hit = ~(np.abs(b) <= clip)
            if np.any(hit):
                n_clip += int(np.count_nonzero(np.any(hit, axis=1)))
                b = np.clip(np.nan_to_num(b, nan=0.0, posinf=clip, neginf=-clip), -clip, clip)
            z = z + b * dt + dW
            if step % stride == 0:
                out[:, step // stride] = z
        clipped[0] += n_clip
        return out

    paths = np.concatenate(_run_groups(n_paths, work, workers), axis=0)
    frac = clipped[0] / (n_paths * n_steps)
    if frac > 1e-3:
        raise SimulationError(f"drift clipped on {frac:.2%} of steps; reduce dt")
    times = dt * stride * np.arange(n_steps // stride + 1)
    return PathEnsemble(times, paths, seed, dt, dim - N,
                        {"scheme": "whittaker", "N": N, "a": a.tolist(), "clipped": clipped[0], "T": T})
