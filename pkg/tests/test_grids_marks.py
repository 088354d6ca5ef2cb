import math

import numpy as np
import pytest

from mfjfbsde.errors import NonPositiveHorizon, ShapeMismatch, ZeroSteps
from mfjfbsde.grids_marks import (
    GENERATOR_NAME, MarkSpace, TimeGrid, load_noise, make_grid, mark_integral, no_marks, sample_noise, save_noise,
    single_mark, substream_seeds,
)


def test_grid_nodes_are_uniform():
    g = make_grid(1.0, 4)
    assert np.array_equal(g.nodes, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert g.t(4) == 1.0


def test_grid_step_for_long_horizon():
    g = make_grid(3 * math.pi / 4, 600)
    assert g.dt == pytest.approx(math.pi / 800, rel=1e-15)
    assert g.nodes[-1] == 3 * math.pi / 4


@pytest.mark.parametrize("T", [0.0, -1.0, float("nan")])
def test_grid_rejects_bad_horizon(T):
    with pytest.raises(NonPositiveHorizon):
        make_grid(T, 10)


@pytest.mark.parametrize("N", [0, -3, 2.5])
def test_grid_rejects_bad_step_count(N):
    with pytest.raises(ZeroSteps):
        make_grid(1.0, N)


def test_grid_refine_doubles_steps():
    assert make_grid(2.0, 5).refine().N == 10


def test_mark_space_invariants():
    ms = MarkSpace([1.0, -1.0], [0.5, 2.0])
    assert ms.M == 2 and ms.C0 == 2.5
    with pytest.raises(ValueError):
        MarkSpace([0.0], [1.0])
    with pytest.raises(ValueError):
        MarkSpace([1.0], [0.0])
    with pytest.raises(ShapeMismatch):
        MarkSpace([1.0, 2.0], [1.0])
    assert no_marks().M == 0


def test_mark_integral_examples():
    assert mark_integral(single_mark(), lambda e: 1.0) == 1.0
    assert mark_integral(single_mark(), lambda e: 0.0) == 0.0
    assert mark_integral(MarkSpace([1.0, -1.0], [0.5, 2.0]), lambda e: e ** 2) == 2.5


def test_mark_integral_is_linear():
    ms = MarkSpace([0.5, -2.0, 3.0], [0.2, 1.5, 0.7])
    f, g = (lambda e: e ** 3), (lambda e: math.cos(e))
    lhs = mark_integral(ms, lambda e: 2 * f(e) - 3 * g(e))
    assert lhs == pytest.approx(2 * mark_integral(ms, f) - 3 * mark_integral(ms, g), abs=1e-13)


def test_noise_is_deterministic_in_seed():
    g, ms = make_grid(1.0, 20), single_mark()
    a, b = sample_noise(g, ms, 300, 42), sample_noise(g, ms, 300, 42)
    assert a.same_as(b) and a.generator == GENERATOR_NAME
    assert not a.same_as(sample_noise(g, ms, 300, 43))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_noise_moments_within_five_standard_errors(seed):
    g = make_grid(1.0, 100)
    panel = sample_noise(g, single_mark(), 100_000, seed)
    dt = g.dt
    counts = panel.dN[3, :, 0]
    assert abs(counts.mean() - dt) <= 5 * math.sqrt(dt / counts.size)
    db = panel.dB[5, :, 0]
    # variance of the sample variance of N(0, dt) is 2 dt^2 / (P - 1)
    assert abs(db.var(ddof=1) - dt) <= 5 * math.sqrt(2 * dt ** 2 / (db.size - 1))


def test_compensated_increments_have_small_mean():
    g = make_grid(1.0, 50)
    panel = sample_noise(g, MarkSpace([1.0, 2.0], [1.0, 3.0]), 50_000, 9)
    comp = panel.compensated()
    se = np.sqrt(panel.marks.weights * g.dt / panel.P)
    assert np.all(np.abs(comp.mean(axis=1)) <= 5 * se)


def test_centered_panel_has_zero_step_means():
    g = make_grid(1.0, 10)
    panel = sample_noise(g, single_mark(), 1000, 4, centered=True)
    assert np.max(np.abs(panel.dB.mean(axis=1))) < 1e-15
    assert np.max(np.abs(panel.compensated().mean(axis=1))) < 1e-15
    with pytest.raises(ValueError):
        panel.subset(10)


def test_substreams_are_distinct_and_reproducible():
    b1, n1 = substream_seeds(5)
    b2, _ = substream_seeds(5)
    assert b1.generate_state(4).tolist() == b2.generate_state(4).tolist()
    assert b1.generate_state(4).tolist() != n1.generate_state(4).tolist()


def test_noise_cache_round_trip(tmp_path):
    g = make_grid(0.5, 7)
    panel = sample_noise(g, MarkSpace([1.0, -0.5], [0.3, 0.9]), 11, 123, d=2)
    path = tmp_path / "noise.bin"
    save_noise(panel, path)
    raw = path.read_bytes()
    assert raw[:5] == b"MFJN1"
    assert int.from_bytes(raw[5:13], "little") == 123
    back = load_noise(path)
    assert np.array_equal(back.dB, panel.dB) and np.array_equal(back.dN, panel.dN)
    assert back.seed == 123 and back.grid.N == 7
