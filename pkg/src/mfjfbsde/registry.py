"""Named problem instances with their default run settings."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .applications import LQParams, MarketParams, lq_problem, portfolio_problem
from .bsde_backward import AFFINE_EXACT, RegressionConfig
from .coefficients import CoefficientSet, ControlProblem, example_3_1, example_3_2
from .errors import UnknownProblem
from .grids_marks import MarkSpace
from .monotonicity import MonotonicityData


@dataclass(frozen=True)
class RegistryEntry:
    """``kind`` is ``"fbsde"`` (uncontrolled coupled system) or ``"control"``."""

    name: str
    kind: str
    build: Callable[[MarkSpace, dict], object]
    defaults: dict
    monotonicity: Optional[Callable[[dict], MonotonicityData]] = None
    solver: dict = field(default_factory=dict)
    parameters: tuple = ()


def _example_3_1(marks: MarkSpace, overrides: dict) -> CoefficientSet:
    return example_3_1(marks, terminal_coefficient=float(overrides.get("terminal_coefficient", 2.0)))


def _example_3_2(marks: MarkSpace, overrides: dict) -> CoefficientSet:
    return example_3_2(marks)


def _market(marks: MarkSpace, overrides: dict) -> MarketParams:
    kw = {k: float(v) for k, v in overrides.items() if k != "eta"}
    eta = overrides.get("eta")
    if eta is None:
        eta = [0.1] * marks.M
    elif np.ndim(eta) == 0:
        eta = [float(eta)] * marks.M
    return MarketParams(marks, eta=list(eta), **kw)


def _lq(marks: MarkSpace, overrides: dict) -> LQParams:
    kw = {k: float(v) for k, v in overrides.items() if k != "L"}
    L = overrides.get("L")
    if L is None:
        L = [0.3] * marks.M
    elif np.ndim(L) == 0:
        L = [float(L)] * marks.M
    return LQParams(marks, L=list(L), **kw)


def _portfolio(marks: MarkSpace, overrides: dict) -> ControlProblem:
    return portfolio_problem(_market(marks, overrides))


def _lq_problem(marks: MarkSpace, overrides: dict) -> ControlProblem:
    return lq_problem(_lq(marks, overrides))


def _example_3_1_constants(overrides: dict) -> MonotonicityData:
    return MonotonicityData(G=[[1.0]], beta1=2.0, beta2=2.0, beta3=2.0, mu1=2.0, C0=1.0, L_A=1.0, L_Phi=1.0,
                            lambda1=1.0)


_CONTROL_SOLVER = {"regression_mode": AFFINE_EXACT, "centered_noise": True}

REGISTRY: Dict[str, RegistryEntry] = {
    "example_3_1": RegistryEntry(
        "example_3_1", "fbsde", _example_3_1,
        {"T": 0.25, "N": 400, "P": 20000, "seed": 5, "marks": [(1.0, 1.0)]},
        _example_3_1_constants, parameters=("terminal_coefficient",)),
    "example_3_2": RegistryEntry(
        "example_3_2", "fbsde", _example_3_2,
        {"T": 3 * math.pi / 4, "N": 200, "P": 2000, "seed": 11, "marks": [(1.0, 1.0)]}),
    "portfolio": RegistryEntry(
        "portfolio", "control", _portfolio,
        {"T": 1.0, "N": 100, "P": 100000, "seed": 1, "marks": [(1.0, 1.0)], "riccati_N": 10000},
        solver=_CONTROL_SOLVER,
        parameters=("rho", "mu", "sigma", "eta", "a", "gamma", "gamma_tilde", "alpha", "alpha_tilde", "beta",
                    "beta_tilde", "x0")),
    "lq": RegistryEntry(
        "lq", "control", _lq_problem,
        {"T": 1.0, "N": 100, "P": 100000, "seed": 1, "marks": [(1.0, 1.0)], "riccati_N": 10000},
        solver=_CONTROL_SOLVER,
        parameters=("a", "a_tilde", "b", "B", "c", "c_tilde", "l", "l_tilde", "D", "L", "R", "N", "Q", "x0")),
}


def get(name: str) -> RegistryEntry:
    try:
        return REGISTRY[name]
    except KeyError:
        raise UnknownProblem(f"unknown problem {name!r}; registered: {', '.join(sorted(REGISTRY))}") from None


def market_params(marks: MarkSpace, overrides: Optional[dict] = None, T: Optional[float] = None) -> MarketParams:
    ov = dict(overrides or {})
    if T is not None:
        ov["T"] = T
    return _market(marks, ov)


def lq_params(marks: MarkSpace, overrides: Optional[dict] = None, T: Optional[float] = None) -> LQParams:
    ov = dict(overrides or {})
    if T is not None:
        ov["T"] = T
    return _lq(marks, ov)


def regression_for(entry: RegistryEntry) -> RegressionConfig:
    return RegressionConfig(mode=entry.solver.get("regression_mode", "regression"))
