"""Uniform time grids, finite mark spaces and reproducible noise panels.

The Poisson random measure is represented by a finite set of marks
``e_1..e_M`` with intensities ``lam_1..lam_M``. Over a step of length
``dt`` the number of jumps carrying mark ``e_j`` is Poisson with mean
``lam_j * dt``, independently across marks, steps and particles.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .errors import IoFailure, NonPositiveHorizon, ShapeMismatch, ZeroSteps

GENERATOR_NAME = "numpy.PCG64"
CACHE_MAGIC = b"MFJN1"


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = i*T/N`` on ``[0, T]``."""

    T: float
    N: int

    def __post_init__(self):
        if not np.isfinite(self.T) or self.T <= 0:
            raise NonPositiveHorizon(f"horizon must be positive, got T={self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise ZeroSteps(f"number of steps must be a positive integer, got N={self.N}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.N + 1, dtype=float) * self.dt
        t[-1] = self.T
        return t

    def t(self, i: int) -> float:
        return self.T if i == self.N else i * self.dt

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.N * factor)


def make_grid(T: float, N: int) -> TimeGrid:
    """Build a uniform grid, rejecting ``T <= 0`` and ``N < 1``."""
    return TimeGrid(float(T), int(N) if float(N).is_integer() else N)


@dataclass(frozen=True)
class MarkSpace:
    """Finite weighted set of nonzero jump marks."""

    marks: np.ndarray
    weights: np.ndarray

    def __init__(self, marks: Sequence, weights: Sequence[float]):
        m = np.asarray(marks, dtype=float)
        if m.ndim == 1:
            m = m[:, None]
        w = np.asarray(weights, dtype=float).reshape(-1)
        if m.ndim != 2 or m.shape[0] != w.shape[0]:
            raise ShapeMismatch("marks and weights must have the same length")
        if m.shape[0] and np.any(np.all(m == 0.0, axis=1)):
            raise ValueError("marks must be nonzero vectors")
        if np.any(~np.isfinite(w)) or np.any(w <= 0):
            raise ValueError("mark weights must be finite and strictly positive")
        m.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "marks", m)
        object.__setattr__(self, "weights", w)

    @property
    def M(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.marks.shape[1]

    @property
    def C0(self) -> float:
        return float(self.weights.sum())

    def __eq__(self, other):
        return (
            isinstance(other, MarkSpace)
            and np.array_equal(self.marks, other.marks)
            and np.array_equal(self.weights, other.weights)
        )

    def __hash__(self):
        return hash((self.marks.tobytes(), self.weights.tobytes()))


def single_mark(weight: float = 1.0, mark: float = 1.0) -> MarkSpace:
    return MarkSpace([[mark]], [weight])


def no_marks() -> MarkSpace:
    """Empty mark space (pure-diffusion or deterministic problems)."""
    return MarkSpace(np.zeros((0, 1)), [])


def mark_integral(marks: MarkSpace, g: Callable[[np.ndarray], float]) -> float:
    """Integrate ``g`` against the mark intensity: ``sum_j g(e_j) lam_j``."""
    vals = np.array([float(g(e if e.shape[0] > 1 else e[0])) for e in marks.marks])
    return float(np.dot(vals, marks.weights))


@dataclass(frozen=True, eq=False)
class NoisePanel:
    """Brownian increments and jump counts for ``P`` particles.

    Arrays are stored time-major for fast per-step access:
    ``dB[i, p, :]`` and ``dN[i, p, j]``. The particle-major views
    required by exports are available via :meth:`brownian_pnd` and
    :meth:`counts_pnm`.

    A ``centered`` panel has Brownian increments with zero mean across
    particles at every step, and its compensated jump increments subtract
    the per-step particle mean of the counts instead of ``lam*dt``.
    """

    seed: int
    grid: TimeGrid
    marks: MarkSpace
    dB: np.ndarray
    dN: np.ndarray
    generator: str = GENERATOR_NAME
    centered: bool = False
    _comp: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def P(self) -> int:
        return self.dB.shape[1]

    @property
    def d(self) -> int:
        return self.dB.shape[2]

    @property
    def M(self) -> int:
        return self.dN.shape[2]

    def compensated(self) -> np.ndarray:
        """Compensated increments ``dN - lam*dt`` (cached, read-only)."""
        out = self._comp.get("c")
        if out is None:
            if self.centered:
                out = self.dN - self.dN.mean(axis=1, keepdims=True)
            else:
                out = self.dN.astype(float) - self.marks.weights[None, None, :] * self.grid.dt
            out.setflags(write=False)
            self._comp["c"] = out
        return out

    def brownian_pnd(self) -> np.ndarray:
        return np.transpose(self.dB, (1, 0, 2))

    def counts_pnm(self) -> np.ndarray:
        return np.transpose(self.dN, (1, 0, 2))

    def subset(self, P: int) -> "NoisePanel":
        """First ``P`` particles of the panel (shares memory)."""
        if self.centered:
            raise ValueError("a subset of a centered panel is no longer centered; draw a new panel")
        return NoisePanel(self.seed, self.grid, self.marks, self.dB[:, :P], self.dN[:, :P], self.generator)

    def same_as(self, other: "NoisePanel") -> bool:
        return (
            self.seed == other.seed
            and self.grid == other.grid
            and self.marks == other.marks
            and self.centered == other.centered
            and np.array_equal(self.dB, other.dB)
            and np.array_equal(self.dN, other.dN)
        )


def substream_seeds(seed: int) -> tuple[np.random.SeedSequence, np.random.SeedSequence]:
    """Two independent child streams: Brownian first, Poisson second."""
    ss = np.random.SeedSequence(int(seed))
    b, n = ss.spawn(2)
    return b, n


def sample_noise(grid: TimeGrid, marks: MarkSpace, P: int, seed: int, d: int = 1,
                 centered: bool = False) -> NoisePanel:
    """Draw a noise panel; identical inputs give bitwise-identical panels.

    ``centered=True`` removes the per-step particle mean of the Brownian
    increments and of the jump counts (first-moment matching), which
    cancels most of the sampling error of ensemble means.
    """
    if int(P) != P or P < 1:
        raise ValueError(f"particle count must be a positive integer, got P={P}")
    if int(d) != d or d < 0:
        raise ValueError(f"Brownian dimension must be a nonnegative integer, got d={d}")
    if int(seed) < 0:
        raise ValueError("seed must be a nonnegative 64-bit integer")
    sb, sn = substream_seeds(seed)
    gb = np.random.Generator(np.random.PCG64(sb))
    gn = np.random.Generator(np.random.PCG64(sn))
    N = grid.N
    dB = gb.standard_normal((N, P, d)) * np.sqrt(grid.dt)
    if centered:
        if P < 2:
            raise ValueError("a centered panel needs at least two particles")
        dB -= dB.mean(axis=1, keepdims=True)
    lam = marks.weights * grid.dt
    dN = gn.poisson(np.broadcast_to(lam, (N, P, marks.M))).astype(np.int64)
    dB.setflags(write=False)
    dN.setflags(write=False)
    return NoisePanel(int(seed), grid, marks, dB, dN, centered=bool(centered))


_HEADER = struct.Struct("<5sQQQQQ")


def save_noise(panel: NoisePanel, path) -> None:
    """Write the panel to a little-endian binary cache.

    Layout: header ``(magic "MFJN1", seed, P, N, d, M)`` as u64 after the
    magic, then ``T`` (f64), mark dimension ``l`` (u64), mark vectors
    (``M*l`` f64), weights (``M`` f64), Brownian increments in
    particle-major order (``P*N*d`` f64) and jump counts (``P*N*M`` i64).
    """
    if panel.centered:
        raise ValueError("centered panels are not cached; regenerate them from the seed")
    try:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(CACHE_MAGIC, panel.seed, panel.P, panel.grid.N, panel.d, panel.M))
            fh.write(struct.pack("<dQ", panel.grid.T, panel.marks.dim))
            fh.write(panel.marks.marks.astype("<f8").tobytes())
            fh.write(panel.marks.weights.astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(panel.brownian_pnd()).astype("<f8").tobytes())
            fh.write(np.ascontiguousarray(panel.counts_pnm()).astype("<i8").tobytes())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def load_noise(path) -> NoisePanel:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    magic, seed, P, N, d, M = _HEADER.unpack_from(raw, 0)
    if magic != CACHE_MAGIC:
        raise IoFailure(f"{path}: not a noise cache (bad magic {magic!r})")
    off = _HEADER.size
    T, l = struct.unpack_from("<dQ", raw, off)
    off += 16

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off)
        off += arr.nbytes
        return arr

    mk = take(M * l, "<f8").reshape(M, l)
    w = take(M, "<f8")
    dB = take(P * N * d, "<f8").reshape(P, N, d).transpose(1, 0, 2).astype(float)
    dN = take(P * N * M, "<i8").reshape(P, N, M).transpose(1, 0, 2).astype(np.int64)
    dB = np.ascontiguousarray(dB)
    dN = np.ascontiguousarray(dN)
    dB.setflags(write=False)
    dN.setflags(write=False)
    return NoisePanel(int(seed), TimeGrid(T, int(N)), MarkSpace(mk, w), dB, dN)
