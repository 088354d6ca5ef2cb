"""Closed-form control applications: mean-variance portfolio with a mean-field
recursive utility, and a mean-field linear-quadratic problem.

Both reduce the optimal feedback law to deterministic coefficient
functions that solve backward ODEs. The ODEs are integrated with
classical RK4 (normative); the printed closed forms are evaluated next to
them and any disagreement is reported through ``flags``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from .coefficients import Box, CoefficientSet, ControlProblem, Dims, Lipschitz
from .errors import DegenerateRiccati, FixedPointDiverged, NonFiniteState
from .fbsde_continuation import ContinuationConfig
from .grids_marks import MarkSpace, NoisePanel, TimeGrid
from .maximum_principle import ControlPath, cost_components, fitted_exponent, solve_controlled_fbsde

log = logging.getLogger(__name__)

Coefficient = Union[float, Callable, np.ndarray]


# ---------------------------------------------------------------------------
# ODE plumbing
# ---------------------------------------------------------------------------


def ode_rk4(rhs: Callable, terminal_state, grid: TimeGrid) -> np.ndarray:
    """Integrate ``state' = rhs(t, state)`` backward from ``T`` with classical RK4.

    Returns the path on the grid nodes, shape ``(N+1, dim)``; row ``N`` is
    the terminal state itself.
    """
    y = np.atleast_1d(np.asarray(terminal_state, dtype=float)).copy()
    N = grid.N
    t = grid.nodes
    path = np.empty((N + 1,) + y.shape)
    path[N] = y
    for i in range(N - 1, -1, -1):
        t1, h = t[i + 1], t[i] - t[i + 1]
        k1 = np.asarray(rhs(t1, y))
        k2 = np.asarray(rhs(t1 + h / 2, y + h / 2 * k1))
        k3 = np.asarray(rhs(t1 + h / 2, y + h / 2 * k2))
        k4 = np.asarray(rhs(t1 + h, y + h * k3))
        y = y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(y)):
            raise NonFiniteState(f"ODE state became non-finite at node {i}", node=i)
        path[i] = y
    return path


def as_time_function(value: Coefficient, T: float) -> Callable:
    """Scalar, callable of ``t``, or samples on a uniform grid over ``[0, T]`` (linearly interpolated)."""
    if callable(value):
        return lambda t: float(value(t))
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        c = float(arr)
        return lambda t: c
    if arr.ndim != 1 or arr.size < 2:
        raise ValueError("sampled coefficients must be a 1-d array with at least two nodes")
    times = np.linspace(0.0, T, arr.size)
    return lambda t: float(np.interp(t, times, arr))


@dataclass
class RiccatiSolution:
    """RK4 coefficient paths plus closed-form evaluations and discrepancy flags."""

    grid: TimeGrid
    paths: Dict[str, np.ndarray]
    p: np.ndarray
    closed_forms: Dict[str, np.ndarray] = field(default_factory=dict)
    flags: Dict[str, dict] = field(default_factory=dict)
    variant: str = "derived"

    def at(self, name: str, t) -> np.ndarray:
        """Linear interpolation in time; exact at grid nodes."""
        arr = self.p if name == "p" else self.paths[name]
        return np.interp(t, self.grid.nodes, arr)

    def terminal(self, name: str) -> float:
        return float((self.p if name == "p" else self.paths[name])[-1])


def _flag(reported: np.ndarray, reference: np.ndarray, tol: float, corrected: Optional[np.ndarray] = None) -> dict:
    err = float(np.max(np.abs(reported - reference)))
    out = {"max_error": err, "detected": err > tol, "tol": tol}
    if corrected is not None:
        cerr = float(np.max(np.abs(corrected - reference)))
        out["corrected_error"] = cerr
        out["detected"] = bool(err > tol and cerr <= tol)
    return out


# ---------------------------------------------------------------------------
# Mean-variance portfolio
# ---------------------------------------------------------------------------


@dataclass
class MarketParams:
    """Market and preference data; ``eta`` holds one jump size per mark."""

    marks: MarkSpace
    rho: Coefficient = 0.05
    mu: Coefficient = 0.12
    sigma: Coefficient = 0.3
    eta: Sequence[Coefficient] = (0.1,)
    a: float = 1.5
    gamma: float = 0.5
    gamma_tilde: float = 0.2
    alpha: float = 0.3
    alpha_tilde: float = 0.1
    beta: float = 0.1
    beta_tilde: float = 0.05
    x0: float = 1.0
    T: float = 1.0
    allow_degenerate: bool = False

    def __post_init__(self):
        if len(self.eta) != self.marks.M:
            raise ValueError("eta needs one entry per mark")
        self._rho = as_time_function(self.rho, self.T)
        self._mu = as_time_function(self.mu, self.T)
        self._sigma = as_time_function(self.sigma, self.T)
        self._eta = [as_time_function(e, self.T) for e in self.eta]
        for name in ("a", "gamma", "gamma_tilde", "alpha", "alpha_tilde", "beta", "beta_tilde"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not self.x0 > 0:
            raise ValueError("initial wealth must be positive")
        for t in np.linspace(0.0, self.T, 65):
            if not self.allow_degenerate and not self.mu_t(t) > self.rho_t(t):
                raise ValueError(f"excess return must be positive (fails at t={t:g})")
            if self.sigma_t(t) == 0 and not self.allow_degenerate:
                raise ValueError(f"volatility vanishes at t={t:g}")
            if np.any(self.eta_t(t) <= -1):
                raise ValueError(f"jump sizes must exceed -1 (fails at t={t:g})")
            if not self.Lambda(t) > 0:
                raise ValueError(f"Lambda must be positive (fails at t={t:g})")

    def rho_t(self, t) -> float:
        return self._rho(t)

    def mu_t(self, t) -> float:
        return self._mu(t)

    def sigma_t(self, t) -> float:
        return self._sigma(t)

    def eta_t(self, t) -> np.ndarray:
        return np.array([e(t) for e in self._eta])

    def Lambda(self, t) -> float:
        return self.sigma_t(t) ** 2 + float(np.sum(self.eta_t(t) ** 2 * self.marks.weights))

    def kappa(self, t) -> float:
        """Squared excess return over ``Lambda``."""
        return (self.mu_t(t) - self.rho_t(t)) ** 2 / self.Lambda(t)

    def p(self, t):
        return np.exp(-(self.beta + self.beta_tilde) * np.asarray(t, dtype=float))


def portfolio_riccati(params: MarketParams, grid: TimeGrid, variant: str = "derived") -> RiccatiSolution:
    """Coefficients of ``q = phi x + psi`` for the portfolio problem.

    ``variant="derived"`` integrates the ODEs obtained from the adjoint
    equation (source ``(alpha + alpha~) rho p`` and terminal
    ``psi_T = -a - (gamma + gamma~) p_T``). ``variant="printed"`` uses the
    published source ``(alpha + alpha~) rho^2`` and terminal
    ``-a - (alpha + alpha~) p_T`` instead; both are kept so the
    discrepancy can be measured.
    """
    if variant not in ("derived", "printed"):
        raise ValueError("variant must be 'derived' or 'printed'")
    P_ = params
    T = grid.T
    aa = P_.alpha + P_.alpha_tilde
    gg = P_.gamma + P_.gamma_tilde
    pT = float(P_.p(T))

    def source(t, printed):
        r = P_.rho_t(t)
        return aa * r * r if printed else aa * r * float(P_.p(t))

    def rhs(t, s):
        r, k = P_.rho_t(t), P_.kappa(t)
        phi, psi_d, psi_p = s[0], s[1], s[2]
        pt = float(P_.p(t))
        return np.array([
            -(2 * r - k) * phi,
            -(r - k) * psi_d - k * pt + source(t, False),
            -(r - k) * psi_p - k * pt + source(t, True),
        ])

    psiT_derived = -P_.a - gg * pT
    psiT_printed = -P_.a - aa * pT
    path = ode_rk4(rhs, [1.0, psiT_derived, psiT_printed], grid)

    # closed forms via quadratures of their exponents and integrals
    def quad_rhs(t, s):
        r, k = P_.rho_t(t), P_.kappa(t)
        A = s[1]
        S = k * float(P_.p(t)) - aa * r * r
        return np.array([-(2 * r - k), -(r - k), -S * np.exp(-A)])

    q = ode_rk4(quad_rhs, [0.0, 0.0, 0.0], grid)
    phi_cf = np.exp(q[:, 0])
    EA = np.exp(q[:, 1])
    psi_cf_printed = psiT_printed * EA - EA * q[:, 2]
    psi_cf_corrected = psiT_printed * EA + EA * q[:, 2]

    phi = path[:, 0]
    psi = path[:, 1] if variant == "derived" else path[:, 2]
    tol = 1e-6 * (1.0 + float(np.max(np.abs(path))))
    flags = {
        "phi_closed_form": _flag(phi_cf, phi, tol),
        "psi_sign": _flag(psi_cf_printed, path[:, 2], tol, corrected=psi_cf_corrected),
        "psi_source": _flag(path[:, 2] - (psiT_printed - psiT_derived) * EA, path[:, 1], tol),
        "psi_terminal": {"printed": psiT_printed, "derived": psiT_derived,
                         "detected": bool(abs(psiT_printed - psiT_derived) > tol)},
    }
    return RiccatiSolution(grid, {"phi": phi, "psi": psi, "psi_derived": path[:, 1], "psi_printed": path[:, 2]},
                           P_.p(grid.nodes),
                           {"phi": phi_cf, "psi_printed": psi_cf_printed, "psi_sign_corrected": psi_cf_corrected},
                           flags, variant)


def portfolio_feedback(riccati: RiccatiSolution, params: MarketParams, t: float, x) -> np.ndarray:
    """Amount held in the risky asset at time ``t`` and wealth ``x``."""
    phi = float(riccati.at("phi", t))
    if phi == 0.0:
        raise DegenerateRiccati(f"phi vanishes at t={t:g}")
    psi = float(riccati.at("psi", t))
    pt = float(riccati.at("p", t))
    excess = params.mu_t(t) - params.rho_t(t)
    return excess * (-phi * np.asarray(x, dtype=float) - psi + pt) / (phi * params.Lambda(t))


def portfolio_foc_residual(riccati: RiccatiSolution, params: MarketParams, t: float, x) -> np.ndarray:
    """First-order condition evaluated with ``q = phi x + psi``, ``m = phi sigma u``, ``n = phi eta u``."""
    x = np.asarray(x, dtype=float)
    u = portfolio_feedback(riccati, params, t, x)
    phi = float(riccati.at("phi", t))
    q = phi * x + float(riccati.at("psi", t))
    pt = float(riccati.at("p", t))
    sig = params.sigma_t(t)
    eta = params.eta_t(t)
    m = phi * sig * u
    jump = sum(phi * eta[j] * u * eta[j] * params.marks.weights[j] for j in range(params.marks.M))
    return (q - pt) * (params.mu_t(t) - params.rho_t(t)) + m * sig + jump


def portfolio_problem(params: MarketParams) -> ControlProblem:
    """Wealth and recursive utility as a controlled system; the cost is minus the utility."""
    P_ = params
    M = P_.marks.M
    dims = Dims(1, 1, 1, M, 1)

    def b(t, s, sp):
        r = P_.rho_t(t)
        return r * s.x + (P_.mu_t(t) - r) * s.v

    def sigma(t, s, sp):
        return (P_.sigma_t(t) * s.v)[..., None]

    def h(t, s, sp):
        return (s.v[..., None] * P_.eta_t(t))

    def f(t, s, sp):
        r = P_.rho_t(t)
        return (P_.alpha * r * s.x + P_.alpha_tilde * r * sp.x + (P_.mu_t(t) - r) * s.v
                - P_.beta * s.y - P_.beta_tilde * sp.y)

    def Phi(x, xp):
        return P_.gamma * x + P_.gamma_tilde * xp

    coeffs = CoefficientSet(dims, P_.marks, b, sigma, h, f, Phi, Lipschitz(), affine_in_primed=True,
                            forward_decoupled=True, name="portfolio", params={"market": P_})
    return ControlProblem(
        coeffs,
        g=lambda t, s, sp: np.zeros(np.broadcast_shapes(s.x.shape[:-1], sp.x.shape[:-1])),
        phi=lambda x, xp: 0.5 * (x[..., 0] - P_.a) ** 2 + 0.0 * xp[..., 0],
        gamma=lambda y: -y[..., 0],
        U=Box(-np.inf, np.inf),
        x0=np.array([P_.x0]),
        name="portfolio",
        params={"market": P_},
    )


def portfolio_candidate(riccati: RiccatiSolution, params: MarketParams, U: Optional[Box] = None) -> ControlPath:
    def law(i, t, x):
        return portfolio_feedback(riccati, params, t, x[:, 0])[:, None]

    return ControlPath(law, U, "portfolio_feedback")


# ---------------------------------------------------------------------------
# Mean-field linear-quadratic problem
# ---------------------------------------------------------------------------


@dataclass
class LQParams:
    marks: MarkSpace
    a: float = -0.5
    a_tilde: float = 0.1
    b: float = 0.2
    B: float = 1.0
    c: float = 0.3
    c_tilde: float = 0.1
    l: float = 0.2
    l_tilde: float = 0.1
    D: float = 0.5
    L: Sequence[float] = (0.3,)
    R: float = 1.0
    N: float = 1.0
    Q: float = 1.0
    x0: float = 1.0
    T: float = 1.0
    allow_degenerate: bool = False

    def __post_init__(self):
        if len(self.L) != self.marks.M:
            raise ValueError("L needs one entry per mark")
        self.L = np.asarray(self.L, dtype=float)
        if not self.allow_degenerate:
            for name in ("R", "N", "Q"):
                if not getattr(self, name) > 0:
                    raise ValueError(f"{name} must be positive")
        if not self.Lambda > 0:
            raise ValueError("Lambda = B^2 + sum L_j^2 lam_j must be positive")

    @property
    def Lambda(self) -> float:
        return self.B ** 2 + float(np.sum(self.L ** 2 * self.marks.weights))

    @property
    def kappa(self) -> float:
        return 2 * self.a + self.b ** 2 - self.B ** 2 * self.b ** 2 / self.Lambda

    def p(self, t, y0: float):
        return -self.Q * y0 * np.exp((self.l + self.l_tilde) * np.asarray(t, dtype=float))


def lq_riccati(params: LQParams, grid: TimeGrid, y0: float) -> RiccatiSolution:
    """RK4 paths of ``phi, psi, theta`` with ``q = phi x + psi E[x] + theta``.

    Closed forms are evaluated when ``kappa != 0``: the printed ``phi`` (with
    ``2a^2`` in its rate) next to the same formula with ``2a``, the printed
    ``psi``, and the printed ``theta`` (integrand factor ``e^{A s}``) next to
    the integrating-factor version (``e^{A (s - t)}``).
    """
    P_ = params
    A = P_.a + P_.a_tilde
    kap = P_.kappa
    lam = P_.Lambda
    src = P_.b * P_.B * P_.D / lam - (P_.c + P_.c_tilde)
    T = grid.T
    pT = float(P_.p(T, y0))

    def rhs(t, s):
        phi, psi, theta, K, W = s
        pt = float(P_.p(t, y0))
        return np.array([
            -kap * phi - P_.R,
            -2 * A * psi - 2 * P_.a_tilde * phi,
            -A * theta - src * pt,
            -2 * P_.a_tilde * phi * np.exp(2 * A * t),
            src * pt * np.exp(A * t),   # d/dt of int_t^T (c + c~ - bBD/Lam) p e^{A s} ds
        ])

    path = ode_rk4(rhs, [P_.N, 0.0, -pT, 0.0, 0.0], grid)
    t = grid.nodes
    phi, psi, theta, K, W = (path[:, j] for j in range(5))
    paths = {"phi": phi, "psi": psi, "theta": theta}
    closed: Dict[str, np.ndarray] = {}
    flags: Dict[str, dict] = {}
    tol = 1e-6 * (1.0 + float(np.max(np.abs(path[:, :3]))))
    if kap != 0.0:
        kp = 2 * P_.a ** 2 + P_.b ** 2 - P_.b ** 2 * P_.B ** 2 / lam
        closed["phi_derived"] = (P_.N + P_.R / kap) * np.exp(kap * (T - t)) - P_.R / kap
        if kp != 0.0:
            closed["phi_printed"] = (P_.N + P_.R / kp) * np.exp(kp * (T - t)) - P_.R / kp
            flags["phi_2a2"] = _flag(closed["phi_printed"], phi, tol, corrected=closed["phi_derived"])
        else:
            flags["phi_2a2"] = {"detected": True, "max_error": float("inf"), "tol": tol,
                                "note": "printed rate vanishes, closed form undefined"}
    else:
        flags["phi_2a2"] = {"detected": False, "skipped": "kappa is zero"}
    closed["psi_printed"] = np.exp(-2 * A * t) * K
    flags["psi_closed_form"] = _flag(closed["psi_printed"], psi, tol)
    closed["theta_printed"] = -pT * np.exp(A * (T - t)) - W
    closed["theta_derived"] = -pT * np.exp(A * (T - t)) - np.exp(-A * t) * W
    flags["theta_exponent"] = _flag(closed["theta_printed"], theta, tol, corrected=closed["theta_derived"])
    return RiccatiSolution(grid, paths, P_.p(t, y0), closed, flags)


def lq_feedback(riccati: RiccatiSolution, params: LQParams, U: Optional[Box] = None) -> ControlPath:
    """``u = (p D - B b phi x) / (Lambda phi)`` as a control law."""

    def law(i, t, x):
        phi = float(riccati.at("phi", t))
        if phi == 0.0:
            raise DegenerateRiccati(f"phi vanishes at t={t:g}")
        pt = float(riccati.at("p", t))
        # split so that phi cancels exactly in the state term
        return pt * params.D / (params.Lambda * phi) - params.B * params.b * x / params.Lambda

    return ControlPath(law, U, "lq_feedback")


def lq_problem(params: LQParams) -> ControlProblem:
    """Linear dynamics with ``y_T = x_T``; costs ``R x^2 / 2`` running, ``N x^2 / 2`` terminal, ``Q y^2 / 2`` initial."""
    P_ = params
    M = P_.marks.M
    dims = Dims(1, 1, 1, M, 1)
    L = P_.L

    def b(t, s, sp):
        return P_.a * s.x + P_.a_tilde * sp.x + 0.0 * s.v

    def sigma(t, s, sp):
        return (P_.b * s.x + P_.B * s.v)[..., None]

    def h(t, s, sp):
        return s.v[..., None] * L + 0.0 * s.x[..., None]

    def f(t, s, sp):
        return P_.c * s.x + P_.c_tilde * sp.x + P_.l * s.y + P_.l_tilde * sp.y + P_.D * s.v

    def Phi(x, xp):
        return x + 0.0 * xp

    coeffs = CoefficientSet(dims, P_.marks, b, sigma, h, f, Phi, Lipschitz(), affine_in_primed=True,
                            forward_decoupled=True, name="lq", params={"lq": P_})
    return ControlProblem(
        coeffs,
        g=lambda t, s, sp: 0.5 * P_.R * s.x[..., 0] ** 2 + 0.0 * sp.x[..., 0],
        phi=lambda x, xp: 0.5 * P_.N * x[..., 0] ** 2 + 0.0 * xp[..., 0],
        gamma=lambda y: 0.5 * P_.Q * y[..., 0] ** 2,
        U=Box(-np.inf, np.inf),
        x0=np.array([P_.x0]),
        name="lq",
        params={"lq": P_},
    )


@dataclass
class LQFixedPoint:
    y0: float
    control: ControlPath
    riccati: RiccatiSolution
    iterations: int
    history: List[float]


def lq_fixed_point(params: LQParams, grid: TimeGrid, marks: MarkSpace, noise: NoisePanel, damping: float = 0.5,
                   tol: float = 1e-8, max_iter: int = 50, riccati_grid: Optional[TimeGrid] = None,
                   config: Optional[ContinuationConfig] = None, y0_init: float = 0.0) -> LQFixedPoint:
    """Close the loop between the feedback law and ``y(0)``.

    Each pass builds the Riccati data for the current ``y0``, simulates the
    controlled system and replaces ``y0`` by a damped update toward the
    ensemble ``y(0)``. When ``D Q = 0`` the law does not depend on ``y0``,
    so a single pass is exact.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    problem = lq_problem(params)
    rgrid = riccati_grid or grid
    y0 = float(y0_init)
    history = [y0]
    independent = params.D * params.Q == 0
    # theta and p are linear in y0 while phi and psi do not see it
    unit = lq_riccati(params, rgrid, 1.0)
    for it in range(1, max_iter + 1):
        ric = RiccatiSolution(rgrid, {"phi": unit.paths["phi"], "psi": unit.paths["psi"],
                                      "theta": y0 * unit.paths["theta"]}, y0 * unit.p)
        ctrl = lq_feedback(ric, params, problem.U)
        ens = solve_controlled_fbsde(problem, ctrl, grid, marks, noise, config)
        new = float(np.mean(ens.y[0]))
        if independent:
            ric = lq_riccati(params, rgrid, new)
            return LQFixedPoint(new, lq_feedback(ric, params, problem.U), ric, it, history + [new])
        step = new - y0
        history.append(new)
        if abs(step) <= tol:
            ric = lq_riccati(params, rgrid, new)
            return LQFixedPoint(new, lq_feedback(ric, params, problem.U), ric, it, history)
        y0 = y0 + damping * step
        if not np.isfinite(y0):
            break
    raise FixedPointDiverged(f"y(0) fixed point not reached in {max_iter} iterations (last step {step:.3e})")


# ---------------------------------------------------------------------------
# Optimality checks by perturbation
# ---------------------------------------------------------------------------


def random_directions(count: int, T: float, seed: int, modes: int = 4, k_ctrl: int = 1) -> List[ControlPath]:
    """Deterministic time functions ``sum_k c_k cos(k pi t / T)`` with unit ``L^2(0, T)`` norm."""
    rng = np.random.default_rng(seed)
    out = []
    for j in range(count):
        coef = rng.standard_normal((modes, k_ctrl))
        # the cosines are orthogonal on [0, T]: norms T for k=0 and T/2 otherwise
        norm2 = T * coef[0] ** 2 + (T / 2) * np.sum(coef[1:] ** 2, axis=0)
        coef = coef / np.sqrt(np.sum(norm2))

        def law(i, t, x, coef=coef):
            val = sum(coef[k] * np.cos(k * np.pi * t / T) for k in range(modes))
            return np.broadcast_to(val, (x.shape[0], k_ctrl))

        out.append(ControlPath(law, None, f"dir{j}"))
    return out


def optimality_gap(problem: ControlProblem, candidate: ControlPath, directions: Sequence[ControlPath],
                   rhos: Sequence[float], grid: TimeGrid, noise: NoisePanel,
                   config: Optional[ContinuationConfig] = None, c_tol: float = 5.0) -> dict:
    """Cost of ``candidate + rho v`` against the candidate on one shared noise panel."""
    marks = problem.coeffs.marks
    base = solve_controlled_fbsde(problem, candidate, grid, marks, noise, config)
    comp = cost_components(problem, base)
    J0 = comp["total"]
    scale = abs(comp["running"]) + abs(comp["terminal"]) + abs(comp["initial"]) or 1.0
    tol = c_tol * (grid.dt + noise.P ** -0.5) * scale
    rows = []
    for j, v in enumerate(directions):
        for rho in rhos:
            if rho == 0:
                J = J0
            else:
                ens = solve_controlled_fbsde(problem, candidate.shifted(v, rho), grid, marks, noise, config)
                J = cost_components(problem, ens)["total"]
            gap = J - J0
            rows.append({"direction": j, "rho": float(rho), "J_candidate": J0, "J_perturbed": J, "gap": gap,
                         "pass": bool(gap >= -tol)})
    positive = sorted({r["rho"] for r in rows if r["rho"] > 0})
    totals = [sum(r["gap"] for r in rows if r["rho"] == rho) for rho in positive]
    exponent = None
    if len(positive) >= 2 and all(tg > 0 for tg in totals):
        exponent = fitted_exponent(positive, totals)
    per_dir = []
    for j in range(len(directions)):
        g = [r["gap"] for r in rows if r["direction"] == j and r["rho"] > 0]
        per_dir.append(fitted_exponent(positive, g) if len(g) >= 2 and all(x > 0 for x in g) else None)
    return {"J_candidate": J0, "tol": tol, "cost_scale": scale, "rows": rows, "exponent": exponent,
            "direction_exponents": per_dir, "pass": all(r["pass"] for r in rows)}


__all__ = [
    "ode_rk4", "as_time_function", "RiccatiSolution", "MarketParams", "portfolio_riccati", "portfolio_feedback",
    "portfolio_foc_residual", "portfolio_problem", "portfolio_candidate", "LQParams", "lq_riccati", "lq_feedback",
    "lq_problem", "LQFixedPoint", "lq_fixed_point", "random_directions", "optimality_gap",
]
