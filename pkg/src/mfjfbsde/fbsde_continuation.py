"""Continuation (homotopy) solver for fully coupled mean-field FBSDEs with jumps.

The target system is embedded in a family indexed by ``alpha`` in
``[0, 1]``. At ``alpha = 0`` the forward equation is trivial and the
backward one is decoupled. Each stage moves from a solved ``alpha0`` to
``alpha0 + delta`` by Picard iteration of the map that freezes the
``delta``-weighted terms at its input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.linalg import expm

from .bsde_backward import AFFINE_EXACT, BSDESolution, NodeMap, RegressionConfig, backward_induction
from .coefficients import CoefficientSet, Slot
from .errors import NonContracting, NonFiniteState, ShapeMismatch, SingularRegression
from .grids_marks import MarkSpace, NoisePanel, TimeGrid
from .particle_dynamics import (
    ForwardRecord, MeanFieldEstimator, ParticleEnsemble, Perturbations, ensemble_norm, forward_given_backward, frozen_terms,
)

SOLVED = "Solved"
UNSOLVABLE = "Unsolvable"
BUDGET = "BudgetExceeded"


@dataclass(frozen=True)
class ContinuationConfig:
    delta_init: float = 0.25
    delta_min: float = 1.0 / 64
    picard_tol: float = 1e-6
    picard_max: int = 40
    contraction_guard: float = 0.9
    regression: RegressionConfig = field(default_factory=RegressionConfig)
    inner_damping: float = 1.0
    inner_memory: int = 5
    inner_tol_factor: float = 0.01
    inner_max: int = 30
    max_stages: int = 200

    def __post_init__(self):
        if not 0 < self.delta_init <= 1:
            raise ValueError("delta_init must lie in (0, 1]")
        if not 0 < self.delta_min <= self.delta_init:
            raise ValueError("need 0 < delta_min <= delta_init")
        if not self.picard_tol > 0:
            raise ValueError("picard_tol must be positive")
        if self.picard_max < 2:
            raise ValueError("picard_max must be at least 2")
        if not 0 < self.contraction_guard < 1:
            raise ValueError("contraction_guard must lie in (0, 1)")
        if not 0 < self.inner_damping <= 1:
            raise ValueError("inner_damping must lie in (0, 1]")


@dataclass
class SolveReport:
    status: str
    alpha_reached: float
    residual_history: list = field(default_factory=list)
    solution: Optional[ParticleEnsemble] = None
    diagnostics: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "status": self.status,
            "alpha_reached": self.alpha_reached,
            "residual_history": [list(r) for r in self.residual_history],
            "diagnostics": self.diagnostics,
        }


@dataclass
class FBSDEProblem:
    """Everything needed to evaluate the continuation map besides ``alpha0, delta``."""

    coeffs: CoefficientSet
    G: np.ndarray
    beta1: float
    grid: TimeGrid
    noise: NoisePanel
    x0: np.ndarray
    config: ContinuationConfig = field(default_factory=ContinuationConfig)
    perturb: Perturbations = field(default_factory=Perturbations)
    estimator: Optional[MeanFieldEstimator] = None
    control: Optional[Callable] = None   # (i, x_i) -> v_i

    def __post_init__(self):
        self.G = np.atleast_2d(np.asarray(self.G, dtype=float))
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        dims = self.coeffs.dims
        if self.G.shape != (dims.m, dims.n):
            raise ShapeMismatch(f"G must be {dims.m}x{dims.n}")
        if self.x0.shape != (dims.n,):
            raise ShapeMismatch(f"x0 must have {dims.n} entries")
        if self.noise.grid != self.grid or self.noise.marks != self.coeffs.marks:
            raise ShapeMismatch("noise panel does not match the grid and marks")
        if self.noise.d != dims.d:
            raise ShapeMismatch("noise Brownian dimension differs from the coefficient dimension")
        if self.estimator is None:
            self.estimator = MeanFieldEstimator.for_coeffs(self.coeffs)

    @property
    def marks(self) -> MarkSpace:
        return self.coeffs.marks

    def trivial_ensemble(self) -> ParticleEnsemble:
        d = self.coeffs.dims
        return ParticleEnsemble.constant(self.grid, self.marks, self.noise.P, self.x0, d.m, d.d)

    def terminal_mean(self, xT: np.ndarray) -> np.ndarray:
        """``E'[Phi(x_T, x_T')]`` for every particle."""
        Phi = self.coeffs.Phi
        if self.estimator.mode == "affine_shortcut":
            return Phi(xT, xT.mean(axis=0, keepdims=True))
        out = np.empty((xT.shape[0], self.coeffs.dims.m))
        ch = self.estimator.chunk
        for s in range(0, xT.shape[0], ch):
            out[s:s + ch] = Phi(xT[s:s + ch, None], xT[None]).mean(axis=1)
        return out

    def controls_for(self, x: np.ndarray) -> Optional[np.ndarray]:
        if self.control is None:
            return None
        return np.stack([self.control(i, x[i]) for i in range(x.shape[0])])


@dataclass
class InnerResult:
    ensemble: ParticleEnsemble
    maps: Optional[List[NodeMap]]
    iterations: int
    residuals: list
    bsde: BSDESolution


def inner_map(prob: FBSDEProblem, alpha0: float, delta: float, inputs: ParticleEnsemble,
              warm_maps: Optional[List[NodeMap]] = None, tol: Optional[float] = None) -> InnerResult:
    """One evaluation of the continuation map at weights ``(alpha0, delta)``.

    The ``delta`` terms are frozen at ``inputs``. The ``alpha0`` coupling
    between the forward state and the backward triple is resolved by a
    damped fixed point on the fitted decoupling field ``x -> (y, z, k)``.
    """
    if not (0 <= alpha0 and 0 <= delta and alpha0 + delta <= 1 + 1e-12):
        raise ValueError("need 0 <= alpha0, 0 <= delta and alpha0 + delta <= 1")
    c = prob.coeffs
    cfg = prob.config
    est = prob.estimator
    grid, noise = prob.grid, prob.noise
    G, beta1 = prob.G, float(prob.beta1)
    pert = prob.perturb
    P = noise.P
    tol = cfg.inner_tol_factor * cfg.picard_tol if tol is None else tol
    exact = cfg.regression.mode == AFFINE_EXACT

    frozen = None
    term_frozen = 0.0
    if delta:
        src = inputs
        if prob.control is not None:
            src = replace(inputs, v=prob.controls_for(inputs.x))
        frozen = frozen_terms(c, src, est)
        term_frozen = delta * (prob.terminal_mean(inputs.x[-1]) - inputs.x[-1] @ G.T)
    xi = 0.0 if pert.terminal is None else pert.terminal

    def run_forward(backward):
        return forward_given_backward(c, alpha0, delta, inputs, grid, c.marks, noise, prob.x0, perturb=pert,
                                      backward=backward, estimator=est, frozen=frozen, record=exact,
                                      control=prob.control)

    def run_backward(X, rec, scalers):
        def driver(i, t, xi_, yhat, zi, ki):
            out = (1 - alpha0) * beta1 * (xi_ @ G.T)
            if alpha0:
                v = None if prob.control is None else prob.control(i, xi_)
                out = out + alpha0 * est(c.f, t, Slot(xi_, yhat, zi, ki, v))
            if delta:
                out = out + delta * (frozen.driver[i] - beta1 * (inputs.x[i] @ G.T))
            if pert.driver is not None:
                out = out + pert.driver(i, t)
            return out

        XT = X[-1]
        terminal = (1 - alpha0) * (XT @ G.T) + term_frozen + xi
        if alpha0:
            terminal = terminal + alpha0 * prob.terminal_mean(XT)
        return backward_induction(grid, noise, X, terminal, driver, cfg.regression, record=rec,
                                  scalers=scalers, keep_maps=True)

    coupled = bool(alpha0) and not c.forward_decoupled
    zeros = (np.zeros((P, c.dims.m)), np.zeros((P, c.dims.m, c.dims.d)), np.zeros((P, c.dims.m, c.dims.M)))

    def as_backward(maps):
        return lambda i, x: maps[i](x) if maps[i] is not None else zeros

    X, rec = run_forward(as_backward(warm_maps) if (coupled and warm_maps) else None)
    if not coupled:
        sol = run_backward(X, rec, None)
        return InnerResult(ParticleEnsemble(grid, c.marks, X, sol.y, sol.z, sol.k), sol.maps, 1, [], sol)

    # Fixed point in the forward path: X -> backward solve -> fitted field -> forward pass.
    # Anderson mixing handles the expanding but linear-dominated coupling of
    # stiff examples where plain iteration oscillates.
    state = _pack(X, rec)
    hist_x: list = []
    hist_g: list = []
    residuals = []
    for it in range(1, cfg.inner_max + 1):
        X, rec = _unpack(state, X.shape, rec)
        sol = run_backward(X, rec, None)
        ens = ParticleEnsemble(grid, c.marks, X, sol.y, sol.z, sol.k)
        Xn, recn = run_forward(as_backward(sol.maps))
        g = _pack(Xn, recn)
        rn = float(np.sum((Xn - X) ** 2) * grid.dt / P + np.sum((Xn[-1] - X[-1]) ** 2) / P)
        residuals.append(rn)
        if not math.isfinite(rn):
            raise NonContracting("inner fixed point became non-finite", residuals=residuals)
        if rn <= tol:
            return InnerResult(ens, sol.maps, it, residuals, sol)
        if len(residuals) > 8 and rn > 1e8 * max(residuals[0], 1e-300):
            raise NonContracting("inner fixed point is diverging", residuals=residuals)
        if len(residuals) > 10 and rn > 0.5 * min(residuals[:-8]):
            raise NonContracting("inner fixed point stalled", residuals=residuals)
        hist_x.append(state)
        hist_g.append(g)
        if len(hist_x) > cfg.inner_memory + 1:
            hist_x.pop(0)
            hist_g.pop(0)
        state = _anderson_step(hist_x, hist_g, cfg.inner_damping)
    raise NonContracting(f"inner fixed point did not reach {tol:g} in {cfg.inner_max} steps", residuals=residuals)


def _pack(X, rec):
    if rec is None:
        return X.reshape(-1).copy()
    return np.concatenate([X.reshape(-1), rec.drift.reshape(-1), rec.diffusion.reshape(-1), rec.jump.reshape(-1)])


def _unpack(state, xshape, rec_like):
    size = int(np.prod(xshape))
    X = state[:size].reshape(xshape)
    if rec_like is None:
        return X, None
    parts = []
    off = size
    for arr in (rec_like.drift, rec_like.diffusion, rec_like.jump):
        parts.append(state[off:off + arr.size].reshape(arr.shape))
        off += arr.size
    return X, ForwardRecord(*parts)


def _anderson_step(hist_x, hist_g, mix):
    """Type-II Anderson update from stored states and map values (latest last)."""
    x, g = hist_x[-1], hist_g[-1]
    r = g - x
    if len(hist_x) < 2:
        return x + mix * r
    dX = np.stack([hist_x[j + 1] - hist_x[j] for j in range(len(hist_x) - 1)], axis=1)
    dG = np.stack([hist_g[j + 1] - hist_g[j] for j in range(len(hist_g) - 1)], axis=1)
    gamma, *_ = np.linalg.lstsq(dG - dX, r, rcond=None)
    x_bar = x - dX @ gamma
    g_bar = g - dG @ gamma
    return (1 - mix) * x_bar + mix * g_bar


@dataclass
class StageResult:
    ensemble: ParticleEnsemble
    iterations: int
    ratios: list
    residuals: list
    maps: Optional[List[NodeMap]]


def distance(a: ParticleEnsemble, b: ParticleEnsemble) -> float:
    """Square root of :func:`ensemble_norm`; contraction ratios are measured in this norm."""
    return math.sqrt(ensemble_norm(a, b))


def solve_at_alpha(prob: FBSDEProblem, alpha0: float, delta: float, warm_start: ParticleEnsemble,
                   warm_maps: Optional[List[NodeMap]] = None) -> StageResult:
    """Picard iteration of :func:`inner_map` started at ``warm_start``.

    Stops when the squared path distance between successive iterates is
    at most ``picard_tol``. Raises :class:`NonContracting` when the ratio
    of successive distances exceeds the guard three times in a row, when
    ``picard_max`` is exhausted, or when the inner loop fails.
    """
    cfg = prob.config
    lam = warm_start
    maps = warm_maps
    ratios: list = []
    residuals: list = []
    streak = 0
    for it in range(1, cfg.picard_max + 1):
        try:
            res = inner_map(prob, alpha0, delta, lam, warm_maps=maps)
        except (NonFiniteState, SingularRegression, FloatingPointError) as exc:
            raise NonContracting(f"map evaluation failed: {exc}", ratios, residuals) from exc
        except NonContracting as exc:
            raise NonContracting(f"inner loop failed: {exc}", ratios, residuals) from exc
        maps = res.maps
        r = ensemble_norm(res.ensemble, lam)
        if not math.isfinite(r):
            raise NonContracting("Picard residual is non-finite", ratios, residuals)
        residuals.append(r)
        if delta == 0:
            # the map ignores its input, so one evaluation is the fixed point
            return StageResult(res.ensemble, it, ratios, residuals, maps)
        if len(residuals) >= 2 and residuals[-2] > 0:
            ratio = math.sqrt(r / residuals[-2])
            ratios.append(ratio)
            streak = streak + 1 if ratio > cfg.contraction_guard else 0
            if streak >= 3:
                raise NonContracting(f"contraction ratio above {cfg.contraction_guard} three times in a row",
                                     ratios, residuals)
        lam = res.ensemble
        if r <= cfg.picard_tol:
            return StageResult(lam, it, ratios, residuals, maps)
    raise NonContracting(f"Picard iteration did not converge in {cfg.picard_max} steps", ratios, residuals)


def solve_fbsde(coeffs: CoefficientSet, G, beta1: float, grid: TimeGrid, marks: MarkSpace, noise: NoisePanel,
                config: Optional[ContinuationConfig] = None, x0=None, perturb: Optional[Perturbations] = None,
                estimator: Optional[MeanFieldEstimator] = None, control: Optional[Callable] = None) -> SolveReport:
    """Continuation from ``alpha = 0`` to ``alpha = 1`` with adaptive steps.

    ``delta`` halves after a failed stage and doubles (capped at
    ``delta_init``) after a successful one. The status is ``Unsolvable``
    once ``delta`` falls below ``delta_min`` and ``BudgetExceeded`` when
    ``max_stages`` attempts are used up.
    """
    if marks != coeffs.marks:
        raise ShapeMismatch("mark space differs from the coefficient set")
    cfg = config or ContinuationConfig()
    x0 = coeffs.params.get("x0") if x0 is None else x0
    if x0 is None:
        raise ValueError("initial state x0 is required")
    prob = FBSDEProblem(coeffs, G, beta1, grid, noise, x0, cfg, perturb or Perturbations(), estimator, control)
    history: list = []
    diag: dict = {"stages": [], "delta_min": cfg.delta_min}
    gap = linear_mean_gap(coeffs, grid.T, prob.x0)
    if gap is not None:
        diag["reduced_ode"] = gap

    base = prob.trivial_ensemble()
    if coeffs.forward_decoupled:
        # forward equation ignores (y, z, k): one forward and one backward pass at alpha = 1
        diag["fast_path"] = True
        try:
            res = inner_map(prob, 1.0, 0.0, base)
        except (NonFiniteState, SingularRegression, NonContracting) as exc:
            diag["error"] = str(exc)
            return SolveReport(UNSOLVABLE, 0.0, history, None, diag)
        history.append((1.0, 1, 0.0))
        diag["stages"].append({"alpha0": 0.0, "delta": 1.0, "ok": True, "iterations": 1})
        diag["bsde_martingale_residual"] = float(np.max(res.bsde.martingale_residual))
        return SolveReport(SOLVED, 1.0, history, res.ensemble, diag)

    try:
        first = solve_at_alpha(prob, 0.0, 0.0, base)
    except NonContracting as exc:
        diag["error"] = str(exc)
        return SolveReport(UNSOLVABLE, 0.0, history, None, diag)
    history.append((0.0, 1, first.residuals[0]))
    current, maps = first.ensemble, first.maps
    alpha = 0.0
    delta = cfg.delta_init
    attempts = 0
    while alpha < 1.0 - 1e-12:
        if attempts >= cfg.max_stages:
            return SolveReport(BUDGET, alpha, history, None, diag)
        attempts += 1
        step = min(delta, 1.0 - alpha)
        try:
            st = solve_at_alpha(prob, alpha, step, current, maps)
        except NonContracting as exc:
            for j, r in enumerate(exc.residuals, 1):
                history.append((alpha + step, j, r))
            diag["stages"].append({"alpha0": alpha, "delta": step, "ok": False, "reason": str(exc),
                                   "ratios": exc.ratios})
            delta = step / 2
            if delta < cfg.delta_min:
                diag["error"] = f"step size fell below delta_min={cfg.delta_min} at alpha={alpha}"
                return SolveReport(UNSOLVABLE, alpha, history, None, diag)
            continue
        for j, r in enumerate(st.residuals, 1):
            history.append((alpha + step, j, r))
        diag["stages"].append({"alpha0": alpha, "delta": step, "ok": True, "iterations": st.iterations,
                               "ratios": st.ratios})
        alpha = 1.0 if step >= 1.0 - alpha - 1e-12 else alpha + step
        current, maps = st.ensemble, st.maps
        delta = min(2 * step, cfg.delta_init)
    return SolveReport(SOLVED, 1.0, history, current, diag)


def linear_mean_gap(coeffs: CoefficientSet, T: float, x0) -> Optional[dict]:
    """Boundary-value analysis of the mean equations for scalar affine problems.

    For ``n = m = 1`` coefficients built by :func:`linear_mf` whose drift
    and driver involve only ``x``, ``y`` and their means, the means solve
    ``X' = bx X + by Y + b0``, ``-Y' = fx X + fy Y + f0`` with
    ``X(0) = x0`` and ``Y(T) = phi X(T) + phi0``. Writing ``Y(0) = c``,
    the terminal mismatch is ``kappa c + gap``. When ``kappa`` vanishes the
    mismatch equals ``gap`` for every ``c``.
    """
    mats = coeffs.params.get("matrices")
    if mats is None or coeffs.dims.n != 1 or coeffs.dims.m != 1:
        return None
    Wb_o, Wb_p, b0 = mats["b"]
    Wf_o, Wf_p, f0 = mats["f"]
    Px, Pp, Pc = coeffs.params["Phi"]
    bx, by = Wb_o[0, 0] + Wb_p[0, 0], Wb_o[0, 1] + Wb_p[0, 1]
    fx, fy = Wf_o[0, 0] + Wf_p[0, 0], Wf_o[0, 1] + Wf_p[0, 1]
    phi = float(Px[0, 0] + Pp[0, 0])
    # augmented linear system in (X, Y, 1)
    A = np.array([[bx, by, b0[0]], [-fx, -fy, -f0[0]], [0.0, 0.0, 0.0]])
    E = expm(A * T)
    x0 = float(np.atleast_1d(x0)[0])

    def mismatch(cval):
        X, Y, _ = E @ np.array([x0, cval, 1.0])
        return Y - phi * X - Pc[0]

    m0, m1 = mismatch(0.0), mismatch(1.0)
    kappa = m1 - m0
    singular = abs(kappa) < 1e-10 * (1 + abs(m0))
    out = {"kappa": float(kappa), "gap": float(m0), "singular": bool(singular),
           "mismatch_at_c0": float(m0), "mismatch_at_c1": float(m1)}
    if not singular:
        out["Y0"] = float(-m0 / kappa)
    return out


def continuity_sweep(family: Callable[[float], CoefficientSet], alphas: Sequence[float], G, beta1: float,
                     grid: TimeGrid, noise: NoisePanel, config: Optional[ContinuationConfig] = None,
                     x0=None) -> dict:
    """Solve each family member on shared noise and measure distances to the ``alpha = 0`` member.

    The perturbation magnitude of each member is the squared path norm
    of the coefficient differences evaluated along the reference solution.
    """
    base_c = family(0.0)
    rep0 = solve_fbsde(base_c, G, beta1, grid, base_c.marks, noise, config, x0)
    if rep0.status != SOLVED:
        raise NonContracting(f"reference member alpha=0 is {rep0.status}")
    ref = rep0.solution
    est = MeanFieldEstimator.for_coeffs(base_c)
    rows = []
    for a in alphas:
        ca = family(a)
        rep = solve_fbsde(ca, G, beta1, grid, ca.marks, noise, config, x0)
        row = {"alpha": float(a), "status": rep.status}
        row["perturbation"] = _coefficient_gap(base_c, ca, ref, est)
        if rep.status == SOLVED:
            row["distance"] = ensemble_norm(rep.solution, ref)
        else:
            row["distance"] = float("nan")
        rows.append(row)
    good = [r for r in rows if r["status"] == SOLVED and r["perturbation"] > 0]
    C = max((r["distance"] / r["perturbation"] for r in good), default=float("nan"))
    return {"rows": rows, "fitted_constant": C}


def _coefficient_gap(c0: CoefficientSet, c1: CoefficientSet, ens: ParticleEnsemble, est) -> float:
    dt = ens.grid.dt
    w = ens.marks.weights
    total = np.zeros(ens.P)
    for i in range(ens.N):
        t = ens.grid.t(i)
        s = ens.node(i)
        pop = est.population(s)
        for fn, wts in (("b", None), ("sigma", None), ("h", w), ("f", None)):
            diff = est.apply(getattr(c1, fn), t, s, pop) - est.apply(getattr(c0, fn), t, s, pop)
            sq = diff**2 if wts is None else diff**2 * wts
            total += dt * sq.reshape(ens.P, -1).sum(axis=1)
    xT = ens.x[-1]
    mean = xT.mean(axis=0, keepdims=True)
    total += np.sum((c1.Phi(xT, mean) - c0.Phi(xT, mean)) ** 2, axis=-1)
    return float(total.mean())


def random_input(base: ParticleEnsemble, rng: np.random.Generator, scale: float = 1.0) -> ParticleEnsemble:
    """Smooth-in-time random perturbation of an ensemble (used by the contraction probe)."""
    N1, P = base.x.shape[:2]
    t = base.grid.nodes / base.grid.T

    def bump(shape):
        freq = rng.integers(1, 4, size=3)
        prof = sum(rng.normal() * np.cos(np.pi * f * t + rng.uniform(0, 2 * np.pi)) for f in freq)
        amp = rng.normal(size=(P,) + shape)
        common = rng.normal(size=shape)
        return scale * prof.reshape((N1,) + (1,) * (1 + len(shape))) * (amp + common)

    x = base.x + bump(base.x.shape[2:])
    x[0] = base.x[0]
    return ParticleEnsemble(base.grid, base.marks, x, base.y + bump(base.y.shape[2:]),
                            base.z + bump(base.z.shape[2:]), base.k + bump(base.k.shape[2:]), base.v)


def contraction_probe(prob: FBSDEProblem, base: ParticleEnsemble, deltas: Sequence[float], trials: int, seed: int,
                      alpha0: float = 0.0, maps: Optional[List[NodeMap]] = None) -> dict:
    """Worst observed ratio ``|I(a) - I(b)| / |a - b|`` per ``delta`` over random input pairs.

    Also fits ``ratio ~ C delta`` by least squares through the origin and
    reports ``delta_half = 1 / (2 C)``.
    """
    rng = np.random.default_rng(seed)
    pairs = [(random_input(base, rng), random_input(base, rng)) for _ in range(trials)]
    rows = []
    for dlt in deltas:
        worst = 0.0
        ratios = []
        for a, b in pairs:
            dist_in = distance(a, b)
            if dlt == 0:
                ratios.append(0.0)
                continue
            out_a = inner_map(prob, alpha0, dlt, a, warm_maps=maps).ensemble
            out_b = inner_map(prob, alpha0, dlt, b, warm_maps=maps).ensemble
            ratios.append(distance(out_a, out_b) / dist_in if dist_in > 0 else 0.0)
        worst = max(ratios) if ratios else 0.0
        rows.append({"delta": float(dlt), "max_ratio": float(worst), "ratios": [float(r) for r in ratios]})
    ds = np.array([r["delta"] for r in rows])
    rs = np.array([r["max_ratio"] for r in rows])
    C = float(ds @ rs / (ds @ ds)) if np.any(ds > 0) else float("nan")
    return {"rows": rows, "slope": C, "delta_half": 0.5 / C if C > 0 else float("inf")}
