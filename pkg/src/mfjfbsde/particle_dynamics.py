"""Interacting particle approximation of mean-field SDEs with jumps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from .coefficients import CoefficientSet, Slot
from .errors import IoFailure, NonFiniteState, ShapeMismatch
from .grids_marks import MarkSpace, NoisePanel, TimeGrid

AFFINE = "affine_shortcut"
PAIRWISE = "full_pairwise"


@dataclass
class ParticleEnsemble:
    """Paths of ``P`` particles on ``N+1`` nodes, stored time-major.

    ``x`` is ``(N+1, P, n)``, ``y`` is ``(N+1, P, m)``, ``z`` is
    ``(N+1, P, m, d)`` and ``k`` is ``(N+1, P, m, M)``. The martingale
    integrands ``z`` and ``k`` at the last node are zero by convention.
    ``v`` optionally holds the control used to generate the paths.
    """

    grid: TimeGrid
    marks: MarkSpace
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    k: np.ndarray
    v: Optional[np.ndarray] = None

    def __post_init__(self):
        N1, P = self.x.shape[:2]
        if N1 != self.grid.N + 1:
            raise ShapeMismatch(f"x has {N1} nodes, grid has {self.grid.N + 1}")
        for name in ("y", "z", "k"):
            arr = getattr(self, name)
            if arr.shape[:2] != (N1, P):
                raise ShapeMismatch(f"{name} must have leading shape {(N1, P)}, got {arr.shape[:2]}")
        if self.k.shape[-1] != self.marks.M:
            raise ShapeMismatch("k must carry one column per mark")

    @property
    def P(self) -> int:
        return self.x.shape[1]

    @property
    def N(self) -> int:
        return self.grid.N

    def node(self, i: int) -> Slot:
        return Slot(self.x[i], self.y[i], self.z[i], self.k[i], None if self.v is None else self.v[i])

    def mean_x(self) -> np.ndarray:
        return self.x.mean(axis=1)

    def mean_y(self) -> np.ndarray:
        return self.y.mean(axis=1)

    def copy(self) -> "ParticleEnsemble":
        return replace(self, x=self.x.copy(), y=self.y.copy(), z=self.z.copy(), k=self.k.copy(),
                       v=None if self.v is None else self.v.copy())

    def with_backward(self, y, z, k) -> "ParticleEnsemble":
        return replace(self, y=y, z=z, k=k)

    @staticmethod
    def constant(grid: TimeGrid, marks: MarkSpace, P: int, x0, m: int, d: int) -> "ParticleEnsemble":
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        N1 = grid.N + 1
        return ParticleEnsemble(
            grid, marks,
            np.broadcast_to(x0, (N1, P, x0.shape[0])).copy(),
            np.zeros((N1, P, m)), np.zeros((N1, P, m, d)), np.zeros((N1, P, m, marks.M)),
        )

    # -- export ---------------------------------------------------------
    def columns(self) -> list:
        n, m = self.x.shape[-1], self.y.shape[-1]
        d, M = self.z.shape[-1], self.k.shape[-1]
        cols = ["particle", "node", "t"]
        cols += [f"x_{a + 1}" for a in range(n)] + [f"y_{a + 1}" for a in range(m)]
        cols += [f"z_{a + 1}_{b + 1}" for a in range(m) for b in range(d)]
        cols += [f"k_{a + 1}_{j + 1}" for a in range(m) for j in range(M)]
        return cols

    def _rows(self, x, y, z, k, particle_ids):
        t = self.grid.nodes
        N1 = t.shape[0]
        flat = np.concatenate([x, y, z.reshape(z.shape[:2] + (-1,)), k.reshape(k.shape[:2] + (-1,))], axis=-1)
        for p_idx, p in enumerate(particle_ids):
            for i in range(N1):
                yield [p, i, t[i], *flat[i, p_idx]]

    def to_csv(self, path, particles: Optional[int] = None) -> None:
        """One row per (particle, node); ``particles`` limits the export."""
        P = self.P if particles is None else min(particles, self.P)
        rows = self._rows(self.x[:, :P], self.y[:, :P], self.z[:, :P], self.k[:, :P], range(P))
        write_csv(path, self.columns(), rows)

    def means_to_csv(self, path) -> None:
        cols = self.columns()[1:]
        cols[0] = "node"
        mean = lambda a: a.mean(axis=1, keepdims=True)  # noqa: E731
        rows = (r[1:] for r in self._rows(mean(self.x), mean(self.y), mean(self.z), mean(self.k), [0]))
        write_csv(path, cols, rows)


def fmt(v) -> str:
    """17 significant digits: enough for an exact float64 round trip."""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def write_csv(path, header, rows) -> None:
    try:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for r in rows:
                w.writerow([fmt(v) if not isinstance(v, str) else v for v in r])
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


class MeanFieldEstimator:
    """Empirical version of the independent-copy expectation ``E'[c(s, s')]``.

    ``affine_shortcut`` replaces the primed argument by the ensemble mean,
    which is exact when ``c`` is affine in the primed slot.
    ``full_pairwise`` averages ``c(s_p, s_q)`` over all ``q`` in chunks.
    """

    def __init__(self, mode: str = AFFINE, chunk: int = 256):
        if mode not in (AFFINE, PAIRWISE):
            raise ValueError(f"unknown estimator mode {mode!r}")
        self.mode = mode
        self.chunk = int(chunk)

    @classmethod
    def for_coeffs(cls, coeffs: CoefficientSet) -> "MeanFieldEstimator":
        return cls(AFFINE if coeffs.affine_in_primed else PAIRWISE)

    def population(self, s: Slot):
        """Precompute what the primed slot needs (the mean, or the sample itself)."""
        if self.mode == PAIRWISE:
            return s
        return s.map(lambda a: a.mean(axis=0, keepdims=True))

    def apply(self, fn: Callable, t: float, s: Slot, pop) -> np.ndarray:
        if self.mode == AFFINE:
            return fn(t, s, pop)
        P = s.x.shape[0]
        out = None
        for start in range(0, P, self.chunk):
            sl = slice(start, min(P, start + self.chunk))
            own = Slot(*(None if a is None else a[sl][:, None] for a in s))
            other = Slot(*(None if a is None else a[None] for a in pop))
            val = fn(t, own, other).mean(axis=1)
            if out is None:
                out = np.empty((P,) + val.shape[1:])
            out[sl] = val
        return out

    def __call__(self, fn: Callable, t: float, s: Slot, sp: Optional[Slot] = None) -> np.ndarray:
        return self.apply(fn, t, s, self.population(s if sp is None else sp))


@dataclass
class ForwardRecord:
    """Per-node coefficients used by the Euler step (needed by the exact affine backward mode)."""

    drift: np.ndarray   # (N, P, n)
    diffusion: np.ndarray  # (N, P, n, d)
    jump: np.ndarray    # (N, P, n, M)


def euler_forward(grid: TimeGrid, noise: NoisePanel, x0, step: Callable, record: bool = False):
    """Explicit Euler for ``dx = drift dt + diffusion dB + jump dN~``.

    ``step(i, t_i, x_i)`` returns ``(drift, diffusion, jump)`` for all
    particles at node ``i``, evaluated at the left point.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    N, P = grid.N, noise.P
    if noise.grid.N != N or noise.dB.shape[0] != N:
        raise ShapeMismatch("noise panel does not match the time grid")
    n = x0.shape[-1]
    x = np.empty((N + 1, P, n))
    x[0] = x0
    dNc = noise.compensated()
    dt = grid.dt
    rec = None
    if record:
        rec = ForwardRecord(np.empty((N, P, n)), np.empty((N, P, n, noise.d)), np.empty((N, P, n, noise.M)))
    for i in range(N):
        drift, diff, jump = step(i, grid.t(i), x[i])
        drift = np.broadcast_to(drift, (P, n))
        diff = np.broadcast_to(diff, (P, n, noise.d))
        jump = np.broadcast_to(jump, (P, n, noise.M))
        nxt = x[i] + drift * dt
        if noise.d:
            nxt = nxt + np.einsum("pnd,pd->pn", diff, noise.dB[i])
        if noise.M:
            nxt = nxt + np.einsum("pnj,pj->pn", jump, dNc[i])
        if not np.all(np.isfinite(nxt)):
            raise NonFiniteState(f"forward state became non-finite at node {i + 1}", node=i + 1)
        x[i + 1] = nxt
        if rec is not None:
            rec.drift[i], rec.diffusion[i], rec.jump[i] = drift, diff, jump
    return x, rec


def _xonly(fn):
    def wrapped(t, s, sp):
        return fn(t, s.x, sp.x)
    return wrapped


def simulate_mckean_vlasov(b: Callable, sigma: Callable, h: Callable, grid: TimeGrid, marks: MarkSpace,
                           noise: NoisePanel, x0, estimator: Optional[MeanFieldEstimator] = None) -> np.ndarray:
    """Particle Euler scheme for a mean-field SDE with jumps.

    Callbacks take ``(t, x, x_primed)`` and return ``(..., n)``,
    ``(..., n, d)`` and ``(..., n, M)`` respectively. Returns ``x`` with
    shape ``(N+1, P, n)``.
    """
    if noise.marks != marks:
        raise ShapeMismatch("noise panel was drawn for a different mark space")
    est = estimator or MeanFieldEstimator(PAIRWISE)
    fb, fs, fh = _xonly(b), _xonly(sigma), _xonly(h)
    P = noise.P

    def step(i, t, x):
        s = Slot(x, np.zeros((P, 0)), np.zeros((P, 0, 0)), np.zeros((P, 0, 0)))
        pop = est.population(s)
        return est.apply(fb, t, s, pop), est.apply(fs, t, s, pop), est.apply(fh, t, s, pop)

    x, _ = euler_forward(grid, noise, x0, step)
    return x


@dataclass
class Perturbations:
    """Exogenous terms of the continuation family; each is ``None`` or a callable of ``(i, t)``.

    Callables return arrays broadcastable to the per-particle shape:
    ``drift`` to ``(P, n)``, ``diffusion`` to ``(P, n, d)``, ``jump`` to
    ``(P, n, M)`` and ``driver`` to ``(P, m)``. ``terminal`` is an array
    broadcastable to ``(P, m)``.
    """

    drift: Optional[Callable] = None
    diffusion: Optional[Callable] = None
    jump: Optional[Callable] = None
    driver: Optional[Callable] = None
    terminal: Optional[np.ndarray] = None

    def is_zero(self) -> bool:
        return all(getattr(self, k) is None for k in ("drift", "diffusion", "jump", "driver", "terminal"))


@dataclass
class FrozenTerms:
    """``E'[b, sigma, h, f](t, lam, lam')`` of an input ensemble at every node."""

    drift: np.ndarray
    diffusion: np.ndarray
    jump: np.ndarray
    driver: np.ndarray


def frozen_terms(coeffs: CoefficientSet, inputs: ParticleEnsemble, estimator: MeanFieldEstimator) -> FrozenTerms:
    N, P = inputs.N, inputs.P
    dims = coeffs.dims
    out = FrozenTerms(np.empty((N, P, dims.n)), np.empty((N, P, dims.n, dims.d)),
                      np.empty((N, P, dims.n, dims.M)), np.empty((N, P, dims.m)))
    for i in range(N):
        t = inputs.grid.t(i)
        s = inputs.node(i)
        pop = estimator.population(s)
        out.drift[i] = estimator.apply(coeffs.b, t, s, pop)
        out.diffusion[i] = estimator.apply(coeffs.sigma, t, s, pop)
        out.jump[i] = estimator.apply(coeffs.h, t, s, pop)
        out.driver[i] = estimator.apply(coeffs.f, t, s, pop)
    return out


def forward_given_backward(coeffs: CoefficientSet, alpha0: float, delta: float, inputs: ParticleEnsemble,
                           grid: TimeGrid, marks: MarkSpace, noise: NoisePanel, x0,
                           perturb: Optional[Perturbations] = None, backward=None,
                           estimator: Optional[MeanFieldEstimator] = None, frozen: Optional[FrozenTerms] = None,
                           record: bool = False, control=None):
    """Forward Euler step of the continuation family with frozen backward paths.

    The coefficient weight ``alpha0`` multiplies the coefficients evaluated
    at ``(X, Y, Z, K)``, where ``X`` evolves and ``(Y, Z, K)`` come from
    ``backward``: either a tuple of ``(y, z, k)`` arrays or a callable
    ``(i, X_i) -> (y_i, z_i, k_i)``. It defaults to the input ensemble's
    backward components. The weight ``delta`` multiplies the coefficients
    evaluated at the input ensemble itself. ``control(i, x_i)`` supplies
    the ``v`` slot when present.

    Returns ``(X, record)``; ``record`` is ``None`` unless requested.
    """
    if noise.marks != marks or noise.grid != grid:
        raise ShapeMismatch("noise panel does not match the grid and marks")
    est = estimator or MeanFieldEstimator.for_coeffs(coeffs)
    pert = perturb or Perturbations()
    if delta and frozen is None:
        frozen = frozen_terms(coeffs, inputs, est)
    if backward is None:
        backward = (inputs.y, inputs.z, inputs.k)

    def step(i, t, x):
        drift = 0.0
        diff = 0.0
        jump = 0.0
        if alpha0:
            if callable(backward):
                y, z, k = backward(i, x)
            else:
                y, z, k = backward[0][i], backward[1][i], backward[2][i]
            v = None if control is None else control(i, x)
            s = Slot(x, y, z, k, v)
            pop = est.population(s)
            drift = alpha0 * est.apply(coeffs.b, t, s, pop)
            diff = alpha0 * est.apply(coeffs.sigma, t, s, pop)
            jump = alpha0 * est.apply(coeffs.h, t, s, pop)
        if delta:
            drift = drift + delta * frozen.drift[i]
            diff = diff + delta * frozen.diffusion[i]
            jump = jump + delta * frozen.jump[i]
        if pert.drift is not None:
            drift = drift + pert.drift(i, t)
        if pert.diffusion is not None:
            diff = diff + pert.diffusion(i, t)
        if pert.jump is not None:
            jump = jump + pert.jump(i, t)
        return drift, diff, jump

    return euler_forward(grid, noise, x0, step, record=record)


def ensemble_norm(a: ParticleEnsemble, b: ParticleEnsemble) -> float:
    """Squared path distance: ``mean_p[dt * sum_{i<N} |diff_i|^2_w + |x_N diff|^2]``.

    The weighted slot norm counts ``sum_j lam_j |k_j|^2`` for jumps.
    """
    for name in ("x", "y", "z", "k"):
        if getattr(a, name).shape != getattr(b, name).shape:
            raise ShapeMismatch(f"ensembles differ in the shape of {name}")
    dt = a.grid.dt
    w = a.marks.weights
    dx = a.x - b.x
    dy = a.y - b.y
    dz = a.z - b.z
    dk = a.k - b.k
    per_node = (np.sum(dx[:-1] ** 2, axis=-1) + np.sum(dy[:-1] ** 2, axis=-1)
                + np.sum(dz[:-1] ** 2, axis=(-2, -1)))
    if dk.shape[-1]:
        per_node = per_node + np.sum(dk[:-1] ** 2 * w, axis=(-2, -1))
    total = dt * per_node.sum(axis=0) + np.sum(dx[-1] ** 2, axis=-1)
    return float(total.mean())
