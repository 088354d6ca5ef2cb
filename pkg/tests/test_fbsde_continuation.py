import math

import numpy as np
import pytest

from mfjfbsde.bsde_backward import AFFINE_EXACT, RegressionConfig
from mfjfbsde.coefficients import Dims, example_3_1, example_3_2, linear_mf
from mfjfbsde.errors import NonContracting, ShapeMismatch
from mfjfbsde.fbsde_continuation import (
    SOLVED, ContinuationConfig, FBSDEProblem, contraction_probe, continuity_sweep, inner_map, linear_mean_gap,
    random_input, solve_at_alpha, solve_fbsde,
)
from mfjfbsde.grids_marks import TimeGrid, sample_noise, single_mark
from mfjfbsde.particle_dynamics import ensemble_norm

SCALAR = Dims(1, 1, 1, 1)


def zero_problem(beta1=0.0, x0=1.0, N=20, P=200, config=None):
    marks = single_mark()
    grid = TimeGrid(1.0, N)
    return FBSDEProblem(linear_mf(SCALAR, marks), [[1.0]], beta1, grid, sample_noise(grid, marks, P, 0), [x0],
                        config or ContinuationConfig())


def example_problem(N=50, P=1000, seed=5):
    marks = single_mark()
    grid = TimeGrid(0.25, N)
    return FBSDEProblem(example_3_1(marks), [[1.0]], 2.0, grid, sample_noise(grid, marks, P, seed), [1.0])


@pytest.fixture(scope="module")
def solved_example():
    prob = example_problem()
    rep = solve_fbsde(prob.coeffs, prob.G, prob.beta1, prob.grid, prob.marks, prob.noise, prob.config, x0=[1.0])
    assert rep.status == SOLVED
    return prob, rep


def test_decoupled_trivial_map():
    # the alpha0 = 0 terminal value is G x(T), so a zero answer needs x0 = 0
    prob = zero_problem(x0=0.0)
    out = inner_map(prob, 0.0, 0.0, prob.trivial_ensemble()).ensemble
    assert np.array_equal(out.x, np.zeros_like(out.x))
    assert np.allclose(out.y, 0.0, atol=1e-14) and np.allclose(out.z, 0.0, atol=1e-14)
    assert np.allclose(out.k, 0.0, atol=1e-14)


def test_decoupled_map_with_monotone_driver_is_linear_in_time():
    x0 = 0.7
    prob = zero_problem(beta1=1.0, x0=x0, config=ContinuationConfig(regression=RegressionConfig(mode=AFFINE_EXACT)))
    out = inner_map(prob, 0.0, 0.0, prob.trivial_ensemble()).ensemble
    grid = prob.grid
    assert np.allclose(out.y[:, :, 0], (x0 * (1 + grid.T - grid.nodes))[:, None], rtol=0, atol=1e-12)


def test_inner_map_rejects_weights_outside_unit_interval():
    prob = zero_problem()
    with pytest.raises(ValueError):
        inner_map(prob, 0.8, 0.5, prob.trivial_ensemble())


def test_zero_step_converges_in_one_iteration():
    prob = example_problem(N=20, P=200)
    st = solve_at_alpha(prob, 0.0, 0.0, prob.trivial_ensemble())
    assert st.iterations == 1


def test_zero_coefficients_are_solved_in_one_step():
    marks = single_mark()
    grid = TimeGrid(1.0, 20)
    rep = solve_fbsde(linear_mf(SCALAR, marks), [[1.0]], 1.0, grid, marks, sample_noise(grid, marks, 100, 0), x0=[2.0])
    assert rep.status == SOLVED and rep.alpha_reached == 1.0
    assert len([s for s in rep.diagnostics["stages"] if s["ok"]]) == 1
    sol = rep.solution
    assert np.array_equal(sol.x, np.full_like(sol.x, 2.0))
    assert np.allclose(sol.y, 0.0, atol=1e-14)


def test_solution_is_a_fixed_point_of_its_last_stage(solved_example):
    prob, rep = solved_example
    last = [s for s in rep.diagnostics["stages"] if s["ok"]][-1]
    again = inner_map(prob, last["alpha0"], last["delta"], rep.solution).ensemble
    assert ensemble_norm(again, rep.solution) <= prob.config.picard_tol


def test_warm_start_from_own_output_converges_quickly(solved_example):
    prob, rep = solved_example
    last = [s for s in rep.diagnostics["stages"] if s["ok"]][-1]
    st = solve_at_alpha(prob, last["alpha0"], last["delta"], rep.solution)
    assert st.iterations <= 2


def test_random_warm_starts_land_on_the_same_solution():
    # family member at alpha = 0.1, reached from two unrelated starting ensembles
    marks = single_mark()
    grid = TimeGrid(0.25, 50)
    cfg = ContinuationConfig(regression=RegressionConfig(mode=AFFINE_EXACT))
    prob = FBSDEProblem(example_3_1(marks), [[1.0]], 2.0, grid, sample_noise(grid, marks, 1000, 5), [1.0], cfg)
    base = solve_at_alpha(prob, 0.0, 0.0, prob.trivial_ensemble())
    rng = np.random.default_rng(8)
    a = solve_at_alpha(prob, 0.0, 0.1, random_input(base.ensemble, rng, 0.5), base.maps).ensemble
    b = solve_at_alpha(prob, 0.0, 0.1, random_input(base.ensemble, rng, 0.5), base.maps).ensemble
    assert ensemble_norm(a, b) <= 3 * cfg.picard_tol


def test_solve_is_deterministic():
    prob = example_problem(N=20, P=300)
    args = (prob.coeffs, prob.G, prob.beta1, prob.grid, prob.marks, prob.noise, prob.config)
    r1, r2 = solve_fbsde(*args, x0=[1.0]), solve_fbsde(*args, x0=[1.0])
    assert r1.status == r2.status == SOLVED
    assert np.array_equal(r1.solution.x, r2.solution.x) and np.array_equal(r1.solution.y, r2.solution.y)
    assert r1.residual_history == r2.residual_history


def test_non_monotone_example_is_not_contracting():
    marks = single_mark()
    grid = TimeGrid(3 * math.pi / 4, 60)
    prob = FBSDEProblem(example_3_2(marks), [[1.0]], 0.0, grid, sample_noise(grid, marks, 300, 11), [1.0])
    with pytest.raises(NonContracting):
        solve_at_alpha(prob, 0.0, 1.0, prob.trivial_ensemble())


def test_reduced_mean_analysis_of_non_monotone_example():
    gap = linear_mean_gap(example_3_2(single_mark()), 3 * math.pi / 4, [1.0])
    assert gap["singular"]
    assert abs(gap["gap"]) == pytest.approx(math.sqrt(2), abs=1e-12)


def test_constant_family_has_zero_distances():
    marks = single_mark()
    grid = TimeGrid(0.25, 20)
    out = continuity_sweep(lambda a: example_3_1(marks), [0.1, 0.2], [[1.0]], 2.0, grid,
                           sample_noise(grid, marks, 300, 2), x0=[1.0])
    for row in out["rows"]:
        assert row["status"] == SOLVED
        assert row["distance"] <= 1e-6 and row["perturbation"] == 0.0


def test_probe_is_zero_at_zero_step():
    prob = example_problem(N=20, P=200)
    base = solve_at_alpha(prob, 0.0, 0.0, prob.trivial_ensemble())
    probe = contraction_probe(prob, base.ensemble, [0.0], trials=2, seed=0, maps=base.maps)
    assert probe["rows"][0]["max_ratio"] == 0.0


def test_config_validation():
    with pytest.raises(ValueError):
        ContinuationConfig(delta_init=0.0)
    with pytest.raises(ValueError):
        ContinuationConfig(delta_init=0.1, delta_min=0.2)
    with pytest.raises(ValueError):
        ContinuationConfig(picard_max=1)
    with pytest.raises(ValueError):
        ContinuationConfig(contraction_guard=1.0)


def test_problem_shape_checks():
    marks = single_mark()
    grid = TimeGrid(1.0, 5)
    noise = sample_noise(grid, marks, 10, 0)
    with pytest.raises(ShapeMismatch):
        FBSDEProblem(linear_mf(SCALAR, marks), [[1.0, 0.0]], 1.0, grid, noise, [0.0])
    with pytest.raises(ShapeMismatch):
        FBSDEProblem(linear_mf(SCALAR, marks), [[1.0]], 1.0, grid, noise, [0.0, 1.0])
    with pytest.raises(ShapeMismatch):
        FBSDEProblem(linear_mf(SCALAR, marks), [[1.0]], 1.0, TimeGrid(1.0, 6), noise, [0.0])
