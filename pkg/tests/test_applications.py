import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from mfjfbsde import registry
from mfjfbsde.applications import (
    LQParams, MarketParams, RiccatiSolution, as_time_function, lq_feedback, lq_fixed_point, lq_problem, lq_riccati,
    ode_rk4, optimality_gap, portfolio_feedback, portfolio_riccati, random_directions,
)
from mfjfbsde.bsde_backward import AFFINE_EXACT, RegressionConfig
from mfjfbsde.errors import DegenerateRiccati, FixedPointDiverged
from mfjfbsde.fbsde_continuation import ContinuationConfig
from mfjfbsde.grids_marks import MarkSpace, TimeGrid, sample_noise, single_mark
from mfjfbsde.maximum_principle import ControlPath, cost_components, solve_controlled_fbsde

MARKS = single_mark()
EXACT = ContinuationConfig(regression=RegressionConfig(mode=AFFINE_EXACT))


def test_rk4_constant_solution():
    path = ode_rk4(lambda t, s: np.zeros_like(s), [1.0], TimeGrid(1.0, 10))
    assert np.array_equal(path[:, 0], np.ones(11))


def test_rk4_exponential_accuracy():
    path = ode_rk4(lambda t, s: -s, [1.0], TimeGrid(1.0, 1000))
    assert abs(path[0, 0] - math.e) <= 1e-8


def test_rk4_is_fourth_order():
    errs = [abs(ode_rk4(lambda t, s: -s, [1.0], TimeGrid(1.0, N))[0, 0] - math.e) for N in (10, 20)]
    assert 12 <= errs[0] / errs[1] <= 20


def test_sampled_coefficients_are_interpolated():
    f = as_time_function([0.0, 2.0, 6.0], 2.0)
    assert f(0.5) == 1.0 and f(1.5) == 4.0 and f(2.0) == 6.0
    with pytest.raises(ValueError):
        as_time_function([1.0], 1.0)


def test_zero_excess_return_gives_pure_exponential():
    rho = 0.07
    mp = MarketParams(MARKS, rho=rho, mu=rho, allow_degenerate=True)
    grid = TimeGrid(1.0, 1000)
    ric = portfolio_riccati(mp, grid)
    assert np.allclose(ric.paths["phi"], np.exp(2 * rho * (grid.T - grid.nodes)), rtol=1e-12, atol=0)


def test_no_discounting_of_utility_gives_unit_multiplier():
    mp = MarketParams(MARKS, beta=0.0, beta_tilde=0.0)
    ric = portfolio_riccati(mp, TimeGrid(1.0, 20))
    assert np.array_equal(ric.p, np.ones(21))


def test_portfolio_terminal_values_are_assigned():
    mp = registry.market_params(MARKS)
    ric = portfolio_riccati(mp, TimeGrid(1.0, 50))
    assert ric.terminal("phi") == 1.0
    assert ric.terminal("psi") == -mp.a - (mp.gamma + mp.gamma_tilde) * float(mp.p(1.0))
    assert not ric.flags["phi_closed_form"]["detected"]


def test_feedback_vanishes_at_the_balance_wealth():
    mp = registry.market_params(MARKS)
    ric = portfolio_riccati(mp, TimeGrid(1.0, 100))
    t = 0.37
    x = (float(ric.at("p", t)) - float(ric.at("psi", t))) / float(ric.at("phi", t))
    assert abs(portfolio_feedback(ric, mp, t, x)) <= 1e-14


def test_feedback_is_linear_in_excess_return():
    mp = MarketParams(MARKS, rho=0.05, mu=0.12)
    doubled = MarketParams(MARKS, rho=0.05, mu=0.19)
    ric = portfolio_riccati(mp, TimeGrid(1.0, 100))
    x = np.array([0.5, 1.0, 2.0])
    assert np.allclose(portfolio_feedback(ric, doubled, 0.3, x), 2 * portfolio_feedback(ric, mp, 0.3, x),
                       rtol=1e-14, atol=0)


@pytest.mark.parametrize("gamma, gamma_tilde", [(0.0, 0.0), (0.5, 0.2)])
def test_feedback_at_the_horizon(gamma, gamma_tilde):
    mp = MarketParams(MARKS, alpha=0.0, alpha_tilde=0.0, beta=0.0, beta_tilde=0.0, gamma=gamma,
                      gamma_tilde=gamma_tilde, a=1.5)
    ric = portfolio_riccati(mp, TimeGrid(1.0, 40))
    x = np.array([0.3, 1.0, 4.0])
    expected = (mp.mu - mp.rho) * (-x + mp.a + gamma + gamma_tilde + 1.0) / mp.Lambda(1.0)
    assert np.allclose(portfolio_feedback(ric, mp, 1.0, x), expected, rtol=1e-14, atol=1e-15)


def test_vanishing_multiplier_is_reported():
    grid = TimeGrid(1.0, 4)
    ric = RiccatiSolution(grid, {"phi": np.zeros(5), "psi": np.zeros(5)}, np.ones(5))
    with pytest.raises(DegenerateRiccati):
        portfolio_feedback(ric, registry.market_params(MARKS), 0.5, 1.0)
    lp = registry.lq_params(MARKS)
    law = lq_feedback(RiccatiSolution(grid, {"phi": np.zeros(5)}, np.ones(5)), lp)
    with pytest.raises(DegenerateRiccati):
        law.evaluate(0, 0.0, np.ones((3, 1)))


def test_market_parameter_validation():
    with pytest.raises(ValueError):
        MarketParams(MARKS, rho=0.1, mu=0.05)
    with pytest.raises(ValueError):
        MarketParams(MARKS, eta=(-1.5,))
    with pytest.raises(ValueError):
        MarketParams(MARKS, eta=(0.1, 0.2))
    with pytest.raises(ValueError):
        LQParams(MARKS, R=0.0)


def test_lq_homogeneous_multiplier():
    lp = LQParams(MARKS, R=0.0, N=1.0, b=0.0, B=0.0, allow_degenerate=True)
    grid = TimeGrid(1.0, 1000)
    ric = lq_riccati(lp, grid, 0.4)
    assert np.allclose(ric.paths["phi"], np.exp(2 * lp.a * (grid.T - grid.nodes)), rtol=1e-12, atol=0)


def test_lq_without_mean_coupling_has_zero_mean_coefficient():
    ric = lq_riccati(LQParams(MARKS, a_tilde=0.0), TimeGrid(1.0, 100), 0.7)
    assert np.array_equal(ric.paths["psi"], np.zeros(101))


def test_lq_balanced_source_gives_homogeneous_offset():
    base = LQParams(MARKS)
    total = base.b * base.B * base.D / base.Lambda
    lp = LQParams(MARKS, c=total - 0.05, c_tilde=0.05)
    grid = TimeGrid(1.0, 1000)
    y0 = 0.8
    ric = lq_riccati(lp, grid, y0)
    expected = -float(lp.p(grid.T, y0)) * np.exp((lp.a + lp.a_tilde) * (grid.T - grid.nodes))
    assert np.allclose(ric.paths["theta"], expected, rtol=1e-12, atol=1e-15)


def test_lq_terminal_values_are_assigned():
    lp = registry.lq_params(MARKS)
    ric = lq_riccati(lp, TimeGrid(1.0, 50), 0.9)
    assert ric.terminal("phi") == lp.N and ric.terminal("psi") == 0.0
    assert ric.terminal("theta") == -float(lp.p(1.0, 0.9))


@pytest.mark.parametrize("override", [{"D": 0.0}, {"Q": 0.0}])
def test_fixed_point_without_feedback_loop_takes_one_pass(override):
    lp = LQParams(MARKS, allow_degenerate=True, **override)
    grid = TimeGrid(1.0, 20)
    fp = lq_fixed_point(lp, grid, MARKS, sample_noise(grid, MARKS, 500, 0, centered=True), config=EXACT)
    assert fp.iterations == 1
    if override.get("Q") == 0.0:
        assert np.array_equal(fp.riccati.p, np.zeros(21))


def test_fixed_point_budget_exhaustion():
    lp = registry.lq_params(MARKS)
    grid = TimeGrid(1.0, 20)
    with pytest.raises(FixedPointDiverged):
        lq_fixed_point(lp, grid, MARKS, sample_noise(grid, MARKS, 200, 0, centered=True), max_iter=1, config=EXACT)


def test_zero_perturbation_has_zero_gap():
    lp = registry.lq_params(MARKS)
    grid = TimeGrid(1.0, 20)
    noise = sample_noise(grid, MARKS, 500, 0, centered=True)
    law = lq_feedback(lq_riccati(lp, grid, 0.9), lp)
    out = optimality_gap(lq_problem(lp), law, random_directions(2, 1.0, 0), [0.0], grid, noise, EXACT)
    assert all(row["gap"] == 0.0 for row in out["rows"])


def test_scaling_costs_keeps_the_law_and_scales_the_cost():
    s = 2.5
    lp = LQParams(MARKS, D=0.0)
    scaled = LQParams(MARKS, D=0.0, R=s * lp.R, N=s * lp.N, Q=s * lp.Q)
    grid = TimeGrid(1.0, 20)
    x = np.linspace(-2, 2, 7)[:, None]
    for i in (0, 7, 19):
        t = grid.t(i)
        a = lq_feedback(lq_riccati(lp, grid, 0.9), lp).evaluate(i, t, x)
        b = lq_feedback(lq_riccati(scaled, grid, 0.9), scaled).evaluate(i, t, x)
        assert np.array_equal(a, b)
        assert np.allclose(a, -lp.B * lp.b * x / lp.Lambda, rtol=1e-15, atol=0)
    noise = sample_noise(grid, MARKS, 300, 1, centered=True)
    ens = solve_controlled_fbsde(lq_problem(lp), ControlPath.constant(0.2), grid, MARKS, noise, EXACT)
    assert cost_components(lq_problem(scaled), ens)["total"] == pytest.approx(
        s * cost_components(lq_problem(lp), ens)["total"], rel=1e-14)


def test_random_directions_have_unit_norm():
    grid = TimeGrid(2.0, 20_000)
    x = np.zeros((1, 1))
    for v in random_directions(3, 2.0, 5, modes=4):
        vals = np.array([v.evaluate(i, t, x)[0, 0] for i, t in enumerate(grid.nodes)])
        assert trapezoid(vals ** 2, grid.nodes) == pytest.approx(1.0, abs=1e-6)


def test_jump_loadings_must_match_marks():
    with pytest.raises(ValueError):
        LQParams(MarkSpace([1.0, 2.0], [0.5, 0.5]), L=(0.3,))
