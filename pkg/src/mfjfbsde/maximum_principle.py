"""Maximum-principle workbench for controlled mean-field FBSDEs with jumps.

Conventions follow :mod:`mfjfbsde.coefficients`: the mark integral is
folded into ``b``, ``sigma`` and ``f`` and the jump coefficient has one
column per mark. The Hamiltonian is therefore

    H = <q, b> + <m, sigma> + sum_j lam_j <n_j, h_j> - <p, f> + g

and its ``v``-gradient is already the mark-integrated quantity that the
necessary condition pairs with ``v - u``. The adjoint jump integrand
``n_j`` multiplies the compensated count of mark ``j``.

Derivatives of user callbacks are central differences. Directional
derivatives (variational equation, cost expansion) perturb the own and
the primed slot together, so the primed-slot terms come out of the
mean-field estimator with no extra bookkeeping.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np

from .bsde_backward import AFFINE_EXACT, RegressionConfig, backward_induction
from .coefficients import Box, ControlProblem, Slot, default_G
from .errors import NonContracting, NonFiniteState, ShapeMismatch, SolveFailed
from .fbsde_continuation import SOLVED, ContinuationConfig, solve_fbsde
from .grids_marks import MarkSpace, NoisePanel, TimeGrid
from .particle_dynamics import (
    PAIRWISE, ForwardRecord, MeanFieldEstimator, ParticleEnsemble, euler_forward, frozen_terms,
)

log = logging.getLogger(__name__)

FD_STEP = 1e-5


# ---------------------------------------------------------------------------
# Controls
# ---------------------------------------------------------------------------


class ControlPath:
    """A control given as a law ``(i, t, x) -> v`` with ``x`` of shape ``(P, n)``.

    Values outside the admissible box ``U`` are projected onto it and the
    number of projected entries is counted in ``projections``.
    """

    def __init__(self, law: Callable, U: Optional[Box] = None, label: str = "control"):
        self.law = law
        self.U = U
        self.label = label
        self.projections = 0

    def evaluate(self, i: int, t: float, x: np.ndarray) -> np.ndarray:
        v = np.asarray(self.law(i, t, x), dtype=float)
        if v.ndim < 2:
            v = np.broadcast_to(np.atleast_1d(v), (x.shape[0], np.atleast_1d(v).shape[-1]))
        if self.U is None:
            return v
        pv = self.U.project(v)
        moved = int(np.count_nonzero(pv != v))
        if moved:
            if not self.projections:
                log.info("control %s: projecting values onto the admissible box", self.label)
            self.projections += moved
        return pv

    def bind(self, grid: TimeGrid) -> Callable:
        """The ``(i, x_i) -> v_i`` callable expected by the solvers."""
        return lambda i, x: self.evaluate(i, grid.t(i), x)

    def along(self, grid: TimeGrid, x: np.ndarray) -> np.ndarray:
        """Values on stored paths ``x`` of shape ``(N+1, P, n)``."""
        return np.stack([self.evaluate(i, grid.t(i), x[i]) for i in range(x.shape[0])])

    def shifted(self, direction: "ControlPath", rho: float) -> "ControlPath":
        """``self + rho * direction``, both evaluated on the current state."""
        base, other = self.law, direction.law

        def law(i, t, x):
            return np.asarray(base(i, t, x), dtype=float) + rho * np.asarray(other(i, t, x), dtype=float)

        return ControlPath(law, self.U, f"{self.label}+{rho:g}*{direction.label}")

    @staticmethod
    def constant(value, U: Optional[Box] = None, label: str = "constant") -> "ControlPath":
        val = np.atleast_1d(np.asarray(value, dtype=float))
        return ControlPath(lambda i, t, x: np.broadcast_to(val, (x.shape[0], val.shape[0])), U, label)

    @staticmethod
    def from_array(values: np.ndarray, U: Optional[Box] = None, label: str = "open_loop") -> "ControlPath":
        """Open-loop control with per-node, per-particle values ``(N+1, P, kc)``."""
        arr = np.asarray(values, dtype=float)
        return ControlPath(lambda i, t, x: arr[i], U, label)


# ---------------------------------------------------------------------------
# Solving and costing
# ---------------------------------------------------------------------------


def _estimator(problem: ControlProblem) -> MeanFieldEstimator:
    return MeanFieldEstimator.for_coeffs(problem.coeffs)


def solve_controlled_fbsde(problem: ControlProblem, control: ControlPath, grid: TimeGrid, marks: MarkSpace,
                           noise: NoisePanel, config: Optional[ContinuationConfig] = None) -> ParticleEnsemble:
    """Solve the state system with ``control`` frozen into the coefficients.

    The returned ensemble carries the control values in ``v``. Raises
    :class:`SolveFailed` (with the report attached) unless the solve ends
    with status ``Solved``.
    """
    c = problem.coeffs
    if marks != c.marks:
        raise ShapeMismatch("mark space differs from the one the problem was built on")
    G = problem.params.get("G", default_G(c.dims))
    beta1 = float(problem.params.get("beta1", 1.0))
    report = solve_fbsde(c, G, beta1, grid, c.marks, noise, config, x0=problem.x0, control=control.bind(grid))
    if report.status != SOLVED:
        raise SolveFailed(f"controlled solve ended with status {report.status}", report)
    ens = report.solution
    return replace(ens, v=control.along(grid, ens.x))


def _terminal_mean(fn: Callable, est: MeanFieldEstimator, xT: np.ndarray) -> np.ndarray:
    """``E'[fn(x_T, x_T')]`` per particle."""
    if est.mode != PAIRWISE:
        return fn(xT, xT.mean(axis=0, keepdims=True))
    out = None
    for s in range(0, xT.shape[0], est.chunk):
        val = fn(xT[s:s + est.chunk, None], xT[None]).mean(axis=1)
        if out is None:
            out = np.empty((xT.shape[0],) + val.shape[1:])
        out[s:s + est.chunk] = val
    return out


def cost_components(problem: ControlProblem, ens: ParticleEnsemble,
                    estimator: Optional[MeanFieldEstimator] = None) -> dict:
    """Running (left-point sum), terminal and initial parts of the cost on stored paths."""
    est = estimator or _estimator(problem)
    grid = ens.grid
    running = 0.0
    for i in range(grid.N):
        running += float(np.mean(est(problem.g, grid.t(i), ens.node(i))))
    running *= grid.dt
    terminal = float(np.mean(_terminal_mean(problem.phi, est, ens.x[-1])))
    initial = float(np.mean(problem.gamma(ens.y[0])))
    return {"running": running, "terminal": terminal, "initial": initial,
            "total": running + terminal + initial}


def evaluate_cost(problem: ControlProblem, control: ControlPath, grid: TimeGrid, marks: MarkSpace, noise: NoisePanel,
                  config: Optional[ContinuationConfig] = None) -> float:
    """Empirical cost of ``control`` on the given noise panel."""
    ens = solve_controlled_fbsde(problem, control, grid, marks, noise, config)
    return cost_components(problem, ens)["total"]


# ---------------------------------------------------------------------------
# Finite-difference helpers
# ---------------------------------------------------------------------------


def _maxabs(s: Slot) -> float:
    return max((float(np.max(np.abs(a))) for a in s if a is not None and a.size), default=0.0)


def _axpy(base: Slot, direction: Slot, eps: float) -> Slot:
    out = []
    for a, d in zip(base, direction):
        if a is None:
            out.append(None)
        elif d is None:
            out.append(a)
        else:
            out.append(a + eps * d)
    return Slot(*out)


def _directional(fn: Callable, base: Slot, direction: Slot, step: float = FD_STEP):
    """Central difference of ``fn(slot)`` along ``direction``; exact for quadratic ``fn``."""
    size = _maxabs(direction)
    if size == 0.0:
        out = fn(base)
        return np.zeros_like(out)
    eps = step * (1.0 + _maxabs(base)) / size
    return (fn(_axpy(base, direction, eps)) - fn(_axpy(base, direction, -eps))) / (2 * eps)


def _fields(s: Slot):
    return [name for name in ("x", "y", "z", "k", "v") if getattr(s, name) is not None and getattr(s, name).size]


def _coords(s: Slot):
    for name in _fields(s):
        arr = getattr(s, name)
        for idx in np.ndindex(arr.shape[1:]):
            yield name, idx


def _bump(s: Slot, name: str, idx, h: np.ndarray) -> Slot:
    arr = getattr(s, name).copy()
    sel = (slice(None),) + idx
    arr[sel] = arr[sel] + h
    return s._replace(**{name: arr})


def _coord_step(s: Slot, name: str, idx, step: float) -> np.ndarray:
    return step * (1.0 + np.abs(getattr(s, name)[(slice(None),) + idx]))


def _zeros_like_slot(s: Slot) -> Slot:
    return Slot(*(None if a is None else np.zeros(a.shape) for a in s))


# ---------------------------------------------------------------------------
# Hamiltonian
# ---------------------------------------------------------------------------


@dataclass
class Costate:
    """Adjoint values at one node: ``p (P, m)``, ``q (P, n)``, ``m (P, n, d)``, ``n (P, n, M)``."""

    p: np.ndarray
    q: np.ndarray
    m: np.ndarray
    n: np.ndarray

    def expand(self) -> "Costate":
        return Costate(self.p[:, None], self.q[:, None], self.m[:, None], self.n[:, None])


def hamiltonian(problem: ControlProblem, t: float, s: Slot, sp: Slot, p, q, m, n) -> np.ndarray:
    """``<q, b> + <m, sigma> + sum_j lam_j <n_j, h_j> - <p, f> + g`` over the batch axes."""
    c = problem.coeffs
    w = c.marks.weights
    val = np.sum(q * c.b(t, s, sp), -1) + np.sum(m * c.sigma(t, s, sp), (-2, -1)) - np.sum(p * c.f(t, s, sp), -1)
    if c.dims.M:
        val = val + np.sum(n * c.h(t, s, sp) * w, (-2, -1))
    return val + problem.g(t, s, sp)


def _mean_hamiltonian(problem: ControlProblem, est: MeanFieldEstimator, t: float, s: Slot, pop: Slot,
                      co: Costate) -> np.ndarray:
    """``E'[H(s_p, s', costate_p)]`` for every particle ``p``."""
    if est.mode != PAIRWISE:
        mean = pop.map(lambda a: a.mean(axis=0, keepdims=True))
        return hamiltonian(problem, t, s, mean, co.p, co.q, co.m, co.n)
    P = s.x.shape[0]
    out = np.empty(P)
    for a in range(0, P, est.chunk):
        sl = slice(a, min(P, a + est.chunk))
        own = Slot(*(None if v is None else v[sl][:, None] for v in s))
        other = Slot(*(None if v is None else v[None] for v in pop))
        cs = Costate(co.p[sl], co.q[sl], co.m[sl], co.n[sl]).expand()
        out[sl] = hamiltonian(problem, t, own, other, cs.p, cs.q, cs.m, cs.n).mean(axis=1)
    return out


def hamiltonian_gradient(problem: ControlProblem, t: float, s: Slot, co: Costate,
                         estimator: Optional[MeanFieldEstimator] = None, step: float = FD_STEP,
                         names: Sequence[str] = ("x", "y", "z", "k", "v"), swapped: bool = True) -> dict:
    """Gradient of the averaged Hamiltonian with respect to the own slot.

    With ``swapped`` the primed-slot contribution
    ``E'[d/d(primed) H(s', s_p, costate')]`` is added, which is how the
    adjoint equation collects the derivatives in the independent copy.
    Returns a dict of arrays shaped like the slot fields.
    """
    est = estimator or _estimator(problem)
    out = {}
    for name in names:
        arr = getattr(s, name)
        if arr is None or not arr.size:
            continue
        g = np.zeros(arr.shape)
        for idx in np.ndindex(arr.shape[1:]):
            h = _coord_step(s, name, idx, step)
            hp = _mean_hamiltonian(problem, est, t, _bump(s, name, idx, h), s, co)
            hm = _mean_hamiltonian(problem, est, t, _bump(s, name, idx, -h), s, co)
            g[(slice(None),) + idx] = (hp - hm) / (2 * h)
        out[name] = g
    if swapped:
        for name, sw in _swapped_gradient(problem, t, s, co, est, step, names).items():
            out[name] = out[name] + sw
    return out


def _swapped_gradient(problem, t, s: Slot, co: Costate, est, step, names) -> dict:
    out = {}
    if est.mode != PAIRWISE:
        # H is affine in the primed slot, so its primed gradient does not depend
        # on where the primed slot sits; evaluate at the mean and average.
        mean = s.map(lambda a: a.mean(axis=0, keepdims=True))
        for name in names:
            arr = getattr(s, name)
            if arr is None or not arr.size:
                continue
            g = np.zeros(arr.shape)
            for idx in np.ndindex(arr.shape[1:]):
                h = float(_coord_step(mean, name, idx, step)[0])
                hp = hamiltonian(problem, t, s, _bump(mean, name, idx, h), co.p, co.q, co.m, co.n)
                hm = hamiltonian(problem, t, s, _bump(mean, name, idx, -h), co.p, co.q, co.m, co.n)
                g[(slice(None),) + idx] = float(np.mean((hp - hm) / (2 * h)))
            out[name] = g
        return out
    P = s.x.shape[0]
    other = Slot(*(None if v is None else v[None] for v in s))
    cs = Costate(co.p[None], co.q[None], co.m[None], co.n[None])
    for name in names:
        arr = getattr(s, name)
        if arr is None or not arr.size:
            continue
        g = np.zeros(arr.shape)
        for a in range(0, P, est.chunk):
            sl = slice(a, min(P, a + est.chunk))
            prim = Slot(*(None if v is None else v[sl][:, None] for v in s))
            for idx in np.ndindex(arr.shape[1:]):
                base = getattr(prim, name)[(slice(None), 0) + idx]
                h = step * (1.0 + np.abs(base))
                bumped = []
                for sign in (1.0, -1.0):
                    pa = getattr(prim, name).copy()
                    pa[(slice(None), 0) + idx] += sign * h
                    pr = prim._replace(**{name: pa})
                    bumped.append(hamiltonian(problem, t, other, pr, cs.p, cs.q, cs.m, cs.n).mean(axis=1))
                g[(sl,) + idx] = (bumped[0] - bumped[1]) / (2 * h)
        out[name] = g
    return out


def _terminal_gradient(problem: ControlProblem, xT: np.ndarray, pT: np.ndarray, est, step) -> np.ndarray:
    """``E'[d_x (phi - <p, Phi>)(x, x') + d_x' (phi - <p', Phi>)(x', x)]`` at the terminal node."""
    Phi, phi = problem.coeffs.Phi, problem.phi

    def Ht(x, xp, p):
        return phi(x, xp) - np.sum(p * Phi(x, xp), -1)

    P, n = xT.shape
    out = np.zeros((P, n))
    if est.mode != PAIRWISE:
        mean = xT.mean(axis=0, keepdims=True)
        for j in range(n):
            h = step * (1.0 + np.abs(xT[:, j]))
            e = np.zeros(n)
            e[j] = 1.0
            out[:, j] = (Ht(xT + h[:, None] * e, mean, pT) - Ht(xT - h[:, None] * e, mean, pT)) / (2 * h)
            hm = step * (1.0 + abs(float(mean[0, j])))
            sw = (Ht(xT, mean + hm * e, pT) - Ht(xT, mean - hm * e, pT)) / (2 * hm)
            out[:, j] += float(np.mean(sw))
        return out
    for a in range(0, P, est.chunk):
        sl = slice(a, min(P, a + est.chunk))
        own = xT[sl][:, None]
        for j in range(n):
            e = np.zeros(n)
            e[j] = 1.0
            h = (step * (1.0 + np.abs(xT[sl, j])))[:, None, None]
            d_own = (Ht(own + h * e, xT[None], pT[sl][:, None]) - Ht(own - h * e, xT[None], pT[sl][:, None])) / (2 * h[..., 0])
            d_sw = (Ht(xT[None], own + h * e, pT[None]) - Ht(xT[None], own - h * e, pT[None])) / (2 * h[..., 0])
            out[sl, j] = d_own.mean(axis=1) + d_sw.mean(axis=1)
    return out


def _gamma_gradient(problem: ControlProblem, y0: np.ndarray, step: float) -> np.ndarray:
    out = np.zeros(y0.shape)
    for j in range(y0.shape[1]):
        h = step * (1.0 + np.abs(y0[:, j]))
        up, dn = y0.copy(), y0.copy()
        up[:, j] += h
        dn[:, j] -= h
        out[:, j] = (problem.gamma(up) - problem.gamma(dn)) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# Variational equation
# ---------------------------------------------------------------------------


def _base_record(problem: ControlProblem, base: ParticleEnsemble, est) -> ForwardRecord:
    fr = frozen_terms(problem.coeffs, base, est)
    return ForwardRecord(fr.drift, fr.diffusion, fr.jump)


def _stack_records(a: ForwardRecord, b: ForwardRecord) -> ForwardRecord:
    return ForwardRecord(np.concatenate([a.drift, b.drift], axis=-1),
                         np.concatenate([a.diffusion, b.diffusion], axis=-2),
                         np.concatenate([a.jump, b.jump], axis=-2))


def _regression(config: Optional[ContinuationConfig]) -> RegressionConfig:
    return (config or ContinuationConfig()).regression


def solve_variational_equation(problem: ControlProblem, base: ParticleEnsemble, u: Optional[ControlPath],
                               direction: ControlPath, noise: NoisePanel,
                               config: Optional[ContinuationConfig] = None, max_sweeps: int = 30,
                               sweep_tol: float = 1e-12, step: float = FD_STEP) -> ParticleEnsemble:
    """Linearisation of the controlled system along ``base`` in the control direction.

    The direction is evaluated along the base paths (an open-loop
    perturbation of the base control). Forward-decoupled problems need a
    single forward and backward sweep; otherwise the sweeps alternate
    until the forward component stops moving.
    """
    c = problem.coeffs
    grid = base.grid
    est = _estimator(problem)
    if base.v is None:
        if u is None:
            raise ValueError("base ensemble carries no control values and no control was given")
        base = replace(base, v=u.along(grid, base.x))
    dv = direction.along(grid, base.x)
    dims = c.dims
    reg = _regression(config)
    rec_base = _base_record(problem, base, est) if reg.mode == AFFINE_EXACT else None

    y1 = np.zeros(base.y.shape)
    z1 = np.zeros(base.z.shape)
    k1 = np.zeros(base.k.shape)
    x1_prev = None
    for sweep in range(1, max_sweeps + 1):
        def step_fn(i, t, x1, y1=y1, z1=z1, k1=k1):
            d = Slot(x1, y1[i], z1[i], k1[i], dv[i])
            b0 = base.node(i)
            return (_directional(lambda s: est(c.b, t, s), b0, d, step),
                    _directional(lambda s: est(c.sigma, t, s), b0, d, step),
                    _directional(lambda s: est(c.h, t, s), b0, d, step))

        x1, rec1 = euler_forward(grid, noise, np.zeros(dims.n), step_fn, record=rec_base is not None)
        state = np.concatenate([base.x, x1], axis=-1)
        record = _stack_records(rec_base, rec1) if rec_base is not None else None

        xT, x1T = base.x[-1], x1[-1]
        terminal = _directional(lambda s: _terminal_mean(c.Phi, est, s.x), Slot(xT, None, None, None),
                                Slot(x1T, None, None, None), step)

        def driver(i, t, st, yhat, zi, ki):
            d = Slot(st[:, dims.n:], yhat, zi, ki, dv[i])
            return _directional(lambda s: est(c.f, t, s), base.node(i), d, step)

        sol = backward_induction(grid, noise, state, terminal, driver, reg, record=record)
        y1, z1, k1 = sol.y, sol.z, sol.k
        if c.forward_decoupled:
            break
        if x1_prev is not None and float(np.max(np.abs(x1 - x1_prev))) <= sweep_tol * (1 + float(np.max(np.abs(x1)))):
            break
        x1_prev = x1
    else:
        raise NonContracting(f"variational sweeps did not settle in {max_sweeps} sweeps")
    return ParticleEnsemble(grid, base.marks, x1, y1, z1, k1, v=dv)


# ---------------------------------------------------------------------------
# Adjoint equation
# ---------------------------------------------------------------------------


@dataclass
class AdjointEnsemble:
    """Costate paths; ``n_adj`` is the jump integrand (one column per mark)."""

    grid: TimeGrid
    p: np.ndarray      # (N+1, P, m)
    q: np.ndarray      # (N+1, P, n)
    m: np.ndarray      # (N+1, P, n, d)
    n_adj: np.ndarray  # (N+1, P, n, M)
    sweeps: int = 1
    martingale_residual: Optional[np.ndarray] = None

    def at(self, i: int) -> Costate:
        return Costate(self.p[i], self.q[i], self.m[i], self.n_adj[i])


def solve_adjoint(problem: ControlProblem, base: ParticleEnsemble, u: Optional[ControlPath], noise: NoisePanel,
                  config: Optional[ContinuationConfig] = None, max_sweeps: int = 30, sweep_tol: float = 1e-10,
                  step: float = FD_STEP) -> AdjointEnsemble:
    """Solve the adjoint system along ``base``.

    ``p`` runs forward from ``p(0) = -gamma_y(y(0))`` and ``(q, m, n)``
    backward from the terminal gradient. When the state coefficients do
    not depend on ``(y, z, k)`` the ``p`` equation does not see ``(q, m, n)``
    and one sweep is exact; otherwise sweeps alternate until ``p`` settles.
    """
    c = problem.coeffs
    grid = base.grid
    est = _estimator(problem)
    if base.v is None:
        if u is None:
            raise ValueError("base ensemble carries no control values and no control was given")
        base = replace(base, v=u.along(grid, base.x))
    dims = c.dims
    N, P = grid.N, base.P
    n, m, d, M = dims.n, dims.m, dims.d, dims.M
    w = c.marks.weights
    reg = _regression(config)
    rec_base = _base_record(problem, base, est) if reg.mode == AFFINE_EXACT else None

    q = np.zeros((N + 1, P, n))
    mm = np.zeros((N + 1, P, n, d))
    nn = np.zeros((N + 1, P, n, M))
    p0 = -_gamma_gradient(problem, base.y[0], step)
    p_prev = None
    sol = None
    for sweep in range(1, max_sweeps + 1):
        def p_step(i, t, p, q=q, mm=mm, nn=nn):
            co = Costate(p, q[i], mm[i], nn[i])
            g = hamiltonian_gradient(problem, t, base.node(i), co, est, step, names=("y", "z", "k"))
            jump = np.zeros((P, m, M))
            if M:
                jump = -g["k"] / w
            diff = -g["z"] if "z" in g else np.zeros((P, m, d))
            return -g["y"], diff, jump

        p, rec_p = euler_forward(grid, noise, p0, p_step, record=rec_base is not None)
        p = np.broadcast_to(p, (N + 1, P, m)).copy()
        state = np.concatenate([base.x, p], axis=-1)
        record = _stack_records(rec_base, rec_p) if rec_base is not None else None
        terminal = _terminal_gradient(problem, base.x[-1], p[-1], est, step)

        def driver(i, t, st, qhat, mi, ni, p=p):
            co = Costate(p[i], qhat, mi, ni)
            return hamiltonian_gradient(problem, t, base.node(i), co, est, step, names=("x",))["x"]

        sol = backward_induction(grid, noise, state, terminal, driver, reg, record=record)
        q, mm, nn = sol.y, sol.z, sol.k
        if c.forward_decoupled:
            break
        if p_prev is not None and float(np.max(np.abs(p - p_prev))) <= sweep_tol * (1 + float(np.max(np.abs(p)))):
            break
        p_prev = p
    else:
        raise NonContracting(f"adjoint sweeps did not settle in {max_sweeps} sweeps")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
        raise NonFiniteState("adjoint paths became non-finite")
    return AdjointEnsemble(grid, p, q, mm, nn, sweep, sol.martingale_residual)


def hamiltonian_v(problem: ControlProblem, base: ParticleEnsemble, adjoint: AdjointEnsemble, i: int,
                  step: float = FD_STEP) -> np.ndarray:
    """``H_v`` at node ``i`` for every particle, shape ``(P, kc)``."""
    g = hamiltonian_gradient(problem, base.grid.t(i), base.node(i), adjoint.at(i), _estimator(problem), step,
                             names=("v",), swapped=False)
    return g["v"]


def _hv_terms(problem: ControlProblem, base: ParticleEnsemble, adjoint: AdjointEnsemble, i: int,
              step: float) -> np.ndarray:
    """Sum of absolute values of the separate contributions to ``H_v`` (a size reference)."""
    t = base.grid.t(i)
    s = base.node(i)
    co = adjoint.at(i)
    zero = Costate(np.zeros_like(co.p), np.zeros_like(co.q), np.zeros_like(co.m), np.zeros_like(co.n))
    total = np.zeros(s.v.shape)
    est = _estimator(problem)
    for part in ("p", "q", "m", "n"):
        cs = replace(zero, **{part: getattr(co, part)})
        g = hamiltonian_gradient(problem, t, s, cs, est, step, names=("v",), swapped=False)["v"]
        total += np.abs(g)
    no_cost = replace(problem, g=lambda t, s, sp: 0.0 * s.x[..., 0])
    g_all = hamiltonian_gradient(problem, t, s, zero, est, step, names=("v",), swapped=False)["v"]
    g_dyn = hamiltonian_gradient(no_cost, t, s, zero, est, step, names=("v",), swapped=False)["v"]
    return total + np.abs(g_all - g_dyn)


# ---------------------------------------------------------------------------
# Necessary condition
# ---------------------------------------------------------------------------


@dataclass
class SMPReport:
    values: np.ndarray          # (N, probes): particle mean of <H_v, v - u>
    node_min: np.ndarray        # (N,)
    minimum: float
    passed: bool
    tol: float
    scale: float
    pathwise_min: np.ndarray    # (N,): worst particle at each node
    probe_labels: List[str] = field(default_factory=list)

    @property
    def worst_node(self) -> int:
        return int(np.argmin(self.node_min))

    def failing_nodes(self) -> np.ndarray:
        return np.nonzero(self.node_min < -self.tol)[0]

    def to_dict(self) -> dict:
        return {"minimum": self.minimum, "pass": self.passed, "tol": self.tol, "scale": self.scale,
                "worst_node": self.worst_node, "failing_nodes": self.failing_nodes().tolist(),
                "probe_labels": list(self.probe_labels)}


def default_probes(U: Box, u: np.ndarray, rng: np.random.Generator, random_count: int = 8):
    """Coordinate moves to each face of ``U`` plus uniform interior draws.

    Infinite bounds are replaced by ``ubar -/+ (1 + |ubar|)`` with ``ubar``
    the particle mean of the control. Returns the labels and the
    ``(P, kc)`` probe arrays.
    """
    kc = u.shape[1]
    ubar = u.mean(axis=0)
    reach = 1.0 + np.abs(ubar)
    lo = np.where(np.isfinite(U.lo), U.lo, ubar - reach)
    hi = np.where(np.isfinite(U.hi), U.hi, ubar + reach)
    labels, probes = [], []
    for j in range(kc):
        for side, bound in (("lo", lo[j]), ("hi", hi[j])):
            v = u.copy()
            v[:, j] = bound
            labels.append(f"{side}{j}")
            probes.append(v)
    for r in range(random_count):
        pt = rng.uniform(lo, hi)
        labels.append(f"rand{r}")
        probes.append(np.broadcast_to(pt, u.shape).copy())
    return labels, probes


def smp_residual(problem: ControlProblem, base: ParticleEnsemble, u: Optional[ControlPath], adjoint: AdjointEnsemble,
                 probe_controls: Optional[Sequence] = None, tol: Optional[float] = None, c_tol: float = 5.0,
                 seed: int = 0, step: float = FD_STEP) -> SMPReport:
    """Evaluate ``E<H_v, v - u>`` at every node ``0..N-1`` for each probe.

    ``probe_controls`` entries are fixed control values of length ``kc``;
    by default :func:`default_probes` is used at each node. The default
    tolerance is ``c_tol * (dt + P^-1/2) * scale``. ``scale`` is the largest
    node value of (particle mean of the summed absolute ``H_v``
    contributions) times (particle mean of the largest probe distance).
    """
    grid = base.grid
    N, P = grid.N, base.P
    if base.v is None:
        if u is None:
            raise ValueError("base ensemble carries no control values and no control was given")
        base = replace(base, v=u.along(grid, base.x))
    rng = np.random.default_rng(seed)
    rows, pw, scale = [], [], 0.0
    labels: List[str] = []
    for i in range(N):
        u_i = base.v[i]
        hv = hamiltonian_v(problem, base, adjoint, i, step)
        if probe_controls is None:
            labels, probes = default_probes(problem.U, u_i, rng)
        else:
            probes = [np.broadcast_to(np.atleast_1d(np.asarray(v, dtype=float)), u_i.shape) for v in probe_controls]
            labels = [f"probe{j}" for j in range(len(probes))]
        vals = np.array([np.sum(hv * (v - u_i), axis=1) for v in probes])  # (probes, P)
        rows.append(vals.mean(axis=1))
        pw.append(float(vals.min()))
        if probes:
            dist = np.max([np.sqrt(np.sum((v - u_i) ** 2, axis=1)) for v in probes], axis=0)
            size = np.sqrt(np.sum(_hv_terms(problem, base, adjoint, i, step) ** 2, axis=1))
            scale = max(scale, float(np.mean(size)) * float(np.mean(dist)))
    values = np.array(rows)
    node_min = values.min(axis=1) if values.size else np.zeros(N)
    if tol is None:
        tol = c_tol * (grid.dt + P ** -0.5) * scale
    minimum = float(node_min.min()) if node_min.size else 0.0
    return SMPReport(values, node_min, minimum, bool(minimum >= -tol), float(tol), scale, np.array(pw), labels)


# ---------------------------------------------------------------------------
# Sufficient conditions
# ---------------------------------------------------------------------------


def _midpoint_check(fn: Callable, draw: Callable, samples: int, tol: float):
    a, b = draw(), draw()
    mid = [(x + y) / 2 for x, y in zip(a, b)]
    fa, fb, fm = fn(*a), fn(*b), fn(*mid)
    scale = 1.0 + np.abs(fa) + np.abs(fb)
    excess = fm - (fa + fb) / 2
    bad = np.nonzero(excess > tol * scale)[0]
    witness = None
    if bad.size:
        j = int(bad[np.argmax(excess[bad])])
        witness = {"first": [np.asarray(x[j]).tolist() for x in a], "second": [np.asarray(x[j]).tolist() for x in b],
                   "excess": float(excess[j])}
    return {"pass": not bad.size, "violations": int(bad.size), "samples": samples, "witness": witness}


def check_sufficiency(problem: ControlProblem, samples: int = 2000, seed: int = 0, box: float = 5.0,
                      tol: float = 1e-9, T: float = 1.0) -> dict:
    """Sample the four convexity conditions of the sufficient maximum principle.

    (1) ``Phi`` affine, by exactness of secant interpolation; (2) ``phi``
    convex in ``(x, x')``; (3) ``gamma`` convex; (4) ``H`` convex in the
    state, primed state and control for random costates. Each entry reports
    ``pass`` and a witness when it fails.
    """
    c = problem.coeffs
    dims = c.dims
    n, m, d, M, kc = dims.n, dims.m, dims.d, dims.M, dims.k_ctrl
    rng = np.random.default_rng(seed)
    S = int(samples)

    def u(*shape):
        return rng.uniform(-box, box, (S,) + shape)

    def u_ctrl():
        lo = np.where(np.isfinite(problem.U.lo), problem.U.lo, -box)
        hi = np.where(np.isfinite(problem.U.hi), problem.U.hi, box)
        return rng.uniform(lo, hi, (S, kc))

    # (1) Phi(theta a + (1-theta) b) == theta Phi(a) + (1-theta) Phi(b)
    xa, xpa, xb, xpb = u(n), u(n), u(n), u(n)
    th = rng.uniform(0, 1, (S, 1))
    lhs = c.Phi(th * xa + (1 - th) * xb, th * xpa + (1 - th) * xpb)
    rhs = th * c.Phi(xa, xpa) + (1 - th) * c.Phi(xb, xpb)
    err = np.max(np.abs(lhs - rhs), axis=-1)
    scl = 1.0 + np.max(np.abs(rhs), axis=-1)
    bad = np.nonzero(err > tol * 1e3 * scl)[0]
    affine = {"pass": not bad.size, "violations": int(bad.size), "samples": S, "witness": None}
    if bad.size:
        j = int(bad[np.argmax(err[bad])])
        affine["witness"] = {"a": [xa[j].tolist(), xpa[j].tolist()], "b": [xb[j].tolist(), xpb[j].tolist()],
                             "theta": float(th[j, 0]), "mismatch": float(err[j])}

    phi_res = _midpoint_check(lambda x, xp: problem.phi(x, xp), lambda: (u(n), u(n)), S, tol)
    gamma_res = _midpoint_check(lambda y: problem.gamma(y), lambda: (u(m),), S, tol)

    costate = Costate(u(m), u(n), u(n, d), u(n, M))
    t = float(rng.uniform(0, T))

    def H(x, y, z, k, v, xp, yp, zp, kp):
        return hamiltonian(problem, t, Slot(x, y, z, k, v), Slot(xp, yp, zp, kp, v), costate.p, costate.q,
                           costate.m, costate.n)

    def draw_point():
        return (u(n), u(m), u(m, d), u(m, M), u_ctrl(), u(n), u(m), u(m, d), u(m, M))

    h_res = _midpoint_check(H, draw_point, S, tol)
    return {"Phi_affine": affine, "phi_convex": phi_res, "gamma_convex": gamma_res, "H_convex": h_res,
            "pass": all(r["pass"] for r in (affine, phi_res, gamma_res, h_res))}


# ---------------------------------------------------------------------------
# Directional cost expansion
# ---------------------------------------------------------------------------


def _cost_derivative(problem: ControlProblem, base: ParticleEnsemble, var: ParticleEnsemble,
                     step: float = FD_STEP) -> float:
    """Derivative of the path cost along the variational paths (first-order cost expansion)."""
    size = max(float(np.max(np.abs(a))) if a.size else 0.0 for a in (var.x, var.y, var.z, var.k, var.v))
    if size == 0.0:
        return 0.0
    ref = max(float(np.max(np.abs(a))) if a.size else 0.0 for a in (base.x, base.y, base.z, base.k, base.v))
    eps = step * (1.0 + ref) / size

    def shifted(sign):
        return replace(base, x=base.x + sign * eps * var.x, y=base.y + sign * eps * var.y,
                       z=base.z + sign * eps * var.z, k=base.k + sign * eps * var.k, v=base.v + sign * eps * var.v)

    return (cost_components(problem, shifted(1))["total"] - cost_components(problem, shifted(-1))["total"]) / (2 * eps)


def directional_cost_check(problem: ControlProblem, u: ControlPath, v: ControlPath, rhos: Sequence[float],
                           grid: TimeGrid, noise: NoisePanel, config: Optional[ContinuationConfig] = None,
                           with_adjoint: bool = True, step: float = FD_STEP) -> dict:
    """Difference quotients ``(J(u + rho v) - J(u)) / rho`` next to the first-order prediction.

    The base control is frozen as an open-loop process along the base
    paths and ``v`` is evaluated there too, so every ``u + rho v`` is an
    open-loop perturbation. ``variational_lhs`` comes from the
    variational equation; ``adjoint_lhs`` is ``E sum <H_v, v> dt`` from the
    adjoint (the duality identity says the two agree).
    """
    base = solve_controlled_fbsde(problem, u, grid, problem.coeffs.marks, noise, config)
    u_open = ControlPath.from_array(base.v, problem.U, "u_open")
    v_vals = v.along(grid, base.x)
    v_open = ControlPath.from_array(v_vals, None, "v_open")
    J0 = cost_components(problem, base)["total"]
    var = solve_variational_equation(problem, base, None, v_open, noise, config, step=step)
    lhs = _cost_derivative(problem, base, var, step)
    adj_lhs = None
    if with_adjoint:
        adj = solve_adjoint(problem, base, None, noise, config, step=step)
        acc = 0.0
        for i in range(grid.N):
            acc += float(np.mean(np.sum(hamiltonian_v(problem, base, adj, i, step) * v_vals[i], axis=1)))
        adj_lhs = acc * grid.dt
    rows = []
    for rho in rhos:
        if rho == 0:
            raise ValueError("rho must be nonzero for a difference quotient")
        J = evaluate_cost(problem, u_open.shifted(v_open, rho), grid, problem.coeffs.marks, noise, config)
        rows.append({"rho": float(rho), "J": J, "quotient": (J - J0) / rho})
    return {"J_base": J0, "variational_lhs": lhs, "adjoint_lhs": adj_lhs, "rows": rows}


def fitted_exponent(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    lx = np.log(np.asarray(xs, dtype=float))
    ly = np.log(np.asarray(ys, dtype=float))
    A = np.stack([lx, np.ones_like(lx)], axis=1)
    slope, _ = np.linalg.lstsq(A, ly, rcond=None)[0]
    return float(slope)


__all__ = [
    "ControlPath", "solve_controlled_fbsde", "cost_components", "evaluate_cost", "hamiltonian",
    "hamiltonian_gradient", "hamiltonian_v", "Costate", "AdjointEnsemble", "solve_adjoint",
    "solve_variational_equation", "SMPReport", "smp_residual", "default_probes", "check_sufficiency",
    "directional_cost_check", "fitted_exponent", "FD_STEP",
]
