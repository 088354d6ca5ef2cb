"""Backward induction for mean-field BSDEs with jumps on a particle ensemble.

Conditional expectations given the forward state are estimated by least
squares on a small basis of the current state. The martingale
integrands come from the increment identities

    z_i   = E[y_{i+1} dB_i | x_i] / dt
    k_i,j = E[y_{i+1} dN~_i,j | x_i] / (lam_j dt)

and the value from the explicit step ``y_i = E[y_{i+1} | x_i] + f dt``.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Callable, List, Optional

import numpy as np

from .coefficients import Slot
from .errors import NonFiniteState, ShapeMismatch, SingularRegression
from .grids_marks import MarkSpace, NoisePanel, TimeGrid
from .particle_dynamics import ForwardRecord, MeanFieldEstimator

REGRESSION = "regression"
AFFINE_EXACT = "affine_exact"


@dataclass(frozen=True)
class RegressionConfig:
    basis: str = "affine"   # "affine" or "polynomial"
    degree: int = 1
    ridge: float = 1e-8
    mode: str = REGRESSION

    def __post_init__(self):
        if self.basis not in ("affine", "polynomial"):
            raise ValueError(f"unknown basis {self.basis!r}")
        if self.degree not in (1, 2, 3):
            raise ValueError("polynomial degree must be 1, 2 or 3")
        if not self.ridge >= 0:
            raise ValueError("ridge must be nonnegative")
        if self.mode not in (REGRESSION, AFFINE_EXACT):
            raise ValueError(f"unknown mode {self.mode!r}")

    @property
    def effective_degree(self) -> int:
        return 1 if self.basis == "affine" else self.degree


@dataclass
class Scaler:
    """Fixed centring and scaling of the state before building features."""

    mu: np.ndarray
    sd: np.ndarray
    live: np.ndarray  # coordinates with nonzero spread

    @staticmethod
    def fit(x: np.ndarray) -> "Scaler":
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        live = sd > 1e-6 * (1.0 + np.abs(mu))
        return Scaler(mu, np.where(live, sd, 1.0), live)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return np.where(self.live, (x - self.mu) / self.sd, 0.0)


def features(u: np.ndarray, degree: int) -> np.ndarray:
    """Constant plus all monomials of total degree ``<= degree`` in the columns of ``u``."""
    cols = [np.ones(u.shape[0])]
    n = u.shape[1]
    for deg in range(1, degree + 1):
        for combo in combinations_with_replacement(range(n), deg):
            c = np.ones(u.shape[0])
            for a in combo:
                c = c * u[:, a]
            cols.append(c)
    return np.stack(cols, axis=1)


def ridge_fit(F: np.ndarray, target: np.ndarray, ridge: float) -> np.ndarray:
    """Least squares ``F beta ~ target`` with ridge ``ridge * trace(Gram)``.

    The first column is the constant feature and is left unpenalised, so
    constant targets are reproduced exactly.
    """
    P = F.shape[0]
    gram = F.T @ F / P
    rhs = F.T @ target / P
    if not (np.all(np.isfinite(gram)) and np.all(np.isfinite(rhs))):
        raise SingularRegression("regression normal equations contain non-finite entries")
    tr = np.trace(gram)
    reg = ridge * tr if tr > 0 else ridge
    try:
        penalty = np.eye(gram.shape[0])
        penalty[0, 0] = 0.0
        beta = np.linalg.solve(gram + reg * penalty, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularRegression(f"normal equations are singular: {exc}") from exc
    if not np.all(np.isfinite(beta)):
        raise SingularRegression("regression coefficients are non-finite")
    return beta


@dataclass
class NodeMap:
    """Fitted decoupling field at one node: ``x -> (y, z, k)``."""

    scaler: Scaler
    degree: int
    beta: np.ndarray  # (F, m + m*d + m*M)
    m: int
    d: int
    M: int

    def __call__(self, x: np.ndarray):
        out = features(self.scaler.transform(x), self.degree) @ self.beta
        m, d, M = self.m, self.d, self.M
        P = x.shape[0]
        return out[:, :m], out[:, m:m + m * d].reshape(P, m, d), out[:, m + m * d:].reshape(P, m, M)

    def blend(self, other: "NodeMap", weight: float) -> "NodeMap":
        """``(1 - weight) * self + weight * other``; both must share the scaler."""
        return NodeMap(self.scaler, self.degree, (1 - weight) * self.beta + weight * other.beta, self.m, self.d, self.M)


@dataclass
class BSDESolution:
    y: np.ndarray
    z: np.ndarray
    k: np.ndarray
    martingale_residual: np.ndarray   # |mean of the one-step martingale defect| per step
    martingale_stderr: np.ndarray     # its Monte Carlo standard error
    regression_residual: np.ndarray   # rms of the value regression residual per step
    maps: Optional[List[NodeMap]] = None
    driver_values: Optional[np.ndarray] = None


def backward_induction(grid: TimeGrid, noise: NoisePanel, x: np.ndarray, terminal: np.ndarray,
                       driver: Callable, config: RegressionConfig, record: Optional[ForwardRecord] = None,
                       scalers: Optional[List[Scaler]] = None, keep_maps: bool = False) -> BSDESolution:
    """Generic backward sweep.

    ``driver(i, t_i, x_i, y_hat, z_i, k_i)`` returns the already
    mean-field-averaged generator for every particle, shape ``(P, m)``.
    """
    N, P = grid.N, x.shape[1]
    if x.shape[0] != N + 1 or noise.P != P or noise.grid.N != N:
        raise ShapeMismatch("forward paths, grid and noise panel disagree")
    terminal = np.broadcast_to(np.asarray(terminal, dtype=float), (P,) + np.shape(terminal)[-1:]) \
        if np.ndim(terminal) else np.full((P, 1), float(terminal))
    if not np.all(np.isfinite(terminal)):
        raise NonFiniteState("terminal values are non-finite", node=N)
    m = terminal.shape[-1]
    d, M = noise.d, noise.M
    lam = noise.marks.weights
    dt = grid.dt
    dNc = noise.compensated()
    deg = config.effective_degree
    exact = config.mode == AFFINE_EXACT
    if exact and record is None:
        raise ValueError("affine_exact mode needs the forward coefficient record")

    y = np.empty((N + 1, P, m))
    z = np.zeros((N + 1, P, m, d))
    k = np.zeros((N + 1, P, m, M))
    y[N] = terminal
    mres = np.zeros(N)
    mse = np.zeros(N)
    rres = np.zeros(N)
    maps: List[Optional[NodeMap]] = [None] * (N + 1)
    drv = np.empty((N, P, m))

    for i in range(N - 1, -1, -1):
        t = grid.t(i)
        yn = y[i + 1]
        if exact:
            sc_next = Scaler.fit(x[i + 1])
            F1 = features(sc_next.transform(x[i + 1]), 1)
            beta, *_ = np.linalg.lstsq(F1, yn, rcond=None)
            fit = F1 @ beta
            rres[i] = float(np.sqrt(np.mean((yn - fit) ** 2)))
            # y_{i+1} ~ c + A x with A = beta[1:]^T / sd
            A = (beta[1:] / sc_next.sd[:, None] * sc_next.live[:, None]).T  # (m, n)
            c = beta[0] - A @ sc_next.mu
            x_pred = x[i] + record.drift[i] * dt
            yhat = x_pred @ A.T + c
            zi = np.einsum("an,pnd->pad", A, record.diffusion[i])
            ki = np.einsum("an,pnj->paj", A, record.jump[i])
        else:
            sc = scalers[i] if scalers is not None else Scaler.fit(x[i])
            F = features(sc.transform(x[i]), deg)
            yhat = F @ ridge_fit(F, yn, config.ridge)
            # regress the innovation y_{i+1} - E[y_{i+1} | x_i]: same conditional
            # covariance with the increments, far smaller variance
            e = yn - yhat
            cols = []
            if d:
                cols.append((e[:, :, None] * noise.dB[i][:, None, :]).reshape(P, m * d) / dt)
            if M:
                cols.append((e[:, :, None] * dNc[i][:, None, :]).reshape(P, m * M) / np.tile(lam * dt, m))
            if cols:
                fitted = F @ ridge_fit(F, np.concatenate(cols, axis=1), config.ridge)
            else:
                fitted = np.zeros((P, 0))
            zi = fitted[:, :m * d].reshape(P, m, d)
            ki = fitted[:, m * d:].reshape(P, m, M)
            rres[i] = float(np.sqrt(np.mean((yn - yhat) ** 2)))
        g = np.asarray(driver(i, t, x[i], yhat, zi, ki), dtype=float)
        g = np.broadcast_to(g, (P, m))
        drv[i] = g
        yi = yhat + g * dt
        if not np.all(np.isfinite(yi)):
            raise NonFiniteState(f"backward value became non-finite at node {i}", node=i)
        y[i], z[i], k[i] = yi, zi, ki
        mart = np.zeros((P, m))
        if d:
            mart = mart + np.einsum("pad,pd->pa", zi, noise.dB[i])
        if M:
            mart = mart + np.einsum("paj,pj->pa", ki, dNc[i])
        defect = yn - yi + g * dt - mart
        mres[i] = float(np.max(np.abs(defect.mean(axis=0))))
        # the fitted innovation has zero sample mean by construction, so the
        # defect mean fluctuates like the sample mean of the stochastic integral
        mse[i] = float(np.max(np.sqrt(defect.var(axis=0) + mart.var(axis=0))) / np.sqrt(P))
        if keep_maps:
            sc = scalers[i] if scalers is not None else Scaler.fit(x[i])
            F = features(sc.transform(x[i]), deg)
            tgt = np.concatenate([yi, zi.reshape(P, -1), ki.reshape(P, -1)], axis=1)
            maps[i] = NodeMap(sc, deg, ridge_fit(F, tgt, config.ridge), m, d, M)
    return BSDESolution(y, z, k, mres, mse, rres, maps if keep_maps else None, drv)


def solve_mf_bsde(f: Callable, terminal, x: np.ndarray, grid: TimeGrid, marks: MarkSpace, noise: NoisePanel,
                  config: Optional[RegressionConfig] = None, estimator: Optional[MeanFieldEstimator] = None,
                  record: Optional[ForwardRecord] = None, control: Optional[np.ndarray] = None) -> BSDESolution:
    """Solve ``-dy = E'[f(t, x, y, z, k; primed)] dt - z dB - k dN~`` with ``y_N = terminal``.

    ``f`` uses the slot convention of :mod:`mfjfbsde.coefficients`; the
    primed slot is the cross-sectional population at the same node
    (using the conditional estimate of ``y`` there, which keeps the step
    explicit). ``control`` optionally fills ``v`` with shape
    ``(N+1, P, kc)``.
    """
    if noise.marks != marks:
        raise ShapeMismatch("noise panel was drawn for a different mark space")
    cfg = config or RegressionConfig()
    est = estimator or MeanFieldEstimator()

    def driver(i, t, xi, yhat, zi, ki):
        v = None if control is None else control[i]
        return est(f, t, Slot(xi, yhat, zi, ki, v))

    return backward_induction(grid, noise, x, terminal, driver, cfg, record=record)
