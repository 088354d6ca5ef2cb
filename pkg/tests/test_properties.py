import numpy as np
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mfjfbsde.cli import ExperimentConfig, parse_config
from mfjfbsde.coefficients import Box
from mfjfbsde.grids_marks import MarkSpace, TimeGrid, mark_integral
from mfjfbsde.monotonicity import MonotonicityData, check_constants
from mfjfbsde.particle_dynamics import ParticleEnsemble, ensemble_norm, fmt

finite = st.floats(-1e6, 1e6, allow_nan=False)
positive = st.floats(1e-3, 1e3, allow_nan=False)
nonzero_mark = st.floats(-10, 10, allow_nan=False).filter(lambda v: abs(v) > 1e-6)
mark_spaces = st.integers(1, 5).flatmap(
    lambda M: st.builds(MarkSpace, st.lists(nonzero_mark, min_size=M, max_size=M),
                        st.lists(positive, min_size=M, max_size=M)))


@given(mark_spaces, finite, finite, st.integers(0, 3))
def test_mark_integral_is_linear(marks, a, b, power):
    g1 = lambda e: e ** power  # noqa: E731
    g2 = np.sin
    combined = mark_integral(marks, lambda e: a * g1(e) + b * g2(e))
    split = a * mark_integral(marks, g1) + b * mark_integral(marks, g2)
    scale = (abs(a) + abs(b)) * float(np.sum(marks.weights * (1 + np.abs(marks.marks[:, 0]) ** power)))
    assert abs(combined - split) <= 1e-12 * scale


@given(mark_spaces)
def test_mark_integral_of_one_is_total_intensity(marks):
    assert np.isclose(mark_integral(marks, lambda e: 1.0), marks.C0, rtol=1e-14, atol=0)


constants = st.fixed_dictionaries({
    "beta1": st.floats(0, 10), "beta2": st.floats(0, 10), "beta3": st.floats(0, 10), "mu1": st.floats(0, 10),
    "C0": st.floats(0, 3), "L_A": st.floats(0, 3), "L_Phi": st.floats(0, 3),
})


@given(constants, st.sampled_from(["beta1", "beta2", "beta3", "mu1"]), st.floats(0, 5))
def test_certificate_survives_larger_monotonicity_constants(values, name, bump):
    base = check_constants(MonotonicityData(G=[[1.0]], **values))
    bumped = check_constants(MonotonicityData(G=[[1.0]], **{**values, name: values[name] + bump}))
    assert bumped.passed or not base.passed


@given(constants, st.sampled_from(["C0", "L_A", "L_Phi"]), st.floats(0, 5))
def test_certificate_is_lost_not_gained_with_larger_lipschitz_constants(values, name, bump):
    base = check_constants(MonotonicityData(G=[[1.0]], **values))
    bumped = check_constants(MonotonicityData(G=[[1.0]], **{**values, name: values[name] + bump}))
    assert base.passed or not bumped.passed


def random_ensemble(seed, grid, marks, P=4):
    rng = np.random.default_rng(seed)
    ens = ParticleEnsemble.constant(grid, marks, P, [0.0, 0.0], 1, 2)
    for arr in (ens.x, ens.y, ens.z, ens.k):
        arr[...] = rng.normal(size=arr.shape)
    return ens


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1), st.floats(-4, 4, allow_nan=False))
def test_ensemble_distance_properties(seed_a, seed_b, c):
    grid, marks = TimeGrid(1.0, 6), MarkSpace([1.0, -2.0], [0.5, 1.5])
    a, b = random_ensemble(seed_a, grid, marks), random_ensemble(seed_b, grid, marks)
    d_ab = ensemble_norm(a, b)
    assert d_ab >= 0 and d_ab == ensemble_norm(b, a)
    assert ensemble_norm(a, a) == 0.0
    # measured from the origin so that the scaling is free of cancellation
    origin = ParticleEnsemble.constant(grid, marks, 4, [0.0, 0.0], 1, 2)
    scaled = a.copy()
    for name in ("x", "y", "z", "k"):
        getattr(scaled, name)[...] *= c
    assert np.isclose(ensemble_norm(origin, scaled), c * c * ensemble_norm(origin, a), rtol=1e-12, atol=0)


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_seventeen_digits_round_trip(v):
    assert float(fmt(v)) == v
    assert np.float64(fmt(np.float64(v))).tobytes() == np.float64(v).tobytes()


boxes = st.integers(1, 4).flatmap(lambda k: st.tuples(
    arrays(float, k, elements=st.floats(-100, 0)), arrays(float, k, elements=st.floats(0, 100)),
    arrays(float, k, elements=st.floats(-1e3, 1e3))))


@given(boxes)
def test_box_projection_is_idempotent_and_inside(data):
    lo, hi, v = data
    box = Box(lo, hi)
    once = box.project(v)
    assert box.contains(once)
    assert np.array_equal(box.project(once), once)
    inside = v[(v >= lo) & (v <= hi)]
    assert np.array_equal(once[(v >= lo) & (v <= hi)], inside)


@given(st.floats(1e-3, 1e3), st.integers(1, 5000), st.integers(0, 2**63 - 1),
       st.lists(st.tuples(nonzero_mark, positive), min_size=1, max_size=3),
       st.floats(-5, 5, allow_nan=False))
def test_config_text_round_trip(T, N, seed, marks, a):
    cfg = ExperimentConfig.defaults("lq")
    cfg.T, cfg.N, cfg.seed, cfg.marks = T, N, seed, marks
    cfg.overrides["a"] = a
    assert parse_config(cfg.to_ini(), "lq").to_dict() == cfg.to_dict()


@given(st.floats(1e-6, 1e6), st.integers(1, 10_000), st.integers(1, 4))
def test_grid_nodes(T, N, factor):
    grid = TimeGrid(T, N)
    nodes = grid.nodes
    assert nodes[0] == 0.0 and nodes[-1] == T and nodes.shape == (N + 1,)
    assert np.all(np.diff(nodes) > 0)
    fine = grid.refine(factor)
    assert np.allclose(fine.nodes[::factor], nodes, rtol=1e-14, atol=1e-14 * T)
