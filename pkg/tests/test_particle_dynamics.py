import csv
import math

import numpy as np
import pytest

from mfjfbsde.coefficients import Dims, example_3_1, linear_mf
from mfjfbsde.errors import NonFiniteState, ShapeMismatch
from mfjfbsde.grids_marks import MarkSpace, TimeGrid, sample_noise, single_mark
from mfjfbsde.particle_dynamics import (
    AFFINE, PAIRWISE, MeanFieldEstimator, ParticleEnsemble, Perturbations, ensemble_norm, forward_given_backward,
    simulate_mckean_vlasov,
)


def zeros_n(*shape):
    return lambda t, x, xp: np.zeros(x.shape[:-1] + shape)


def test_zero_dynamics_keep_initial_state():
    grid, marks = TimeGrid(1.0, 20), single_mark()
    x = simulate_mckean_vlasov(zeros_n(2), zeros_n(2, 1), zeros_n(2, 1), grid, marks,
                               sample_noise(grid, marks, 50, 0), [1.0, -2.0])
    assert np.array_equal(x, np.broadcast_to([1.0, -2.0], x.shape))


def test_mean_driven_growth_is_euler_exponential():
    grid, marks = TimeGrid(1.0, 100), single_mark()
    x = simulate_mckean_vlasov(lambda t, x, xp: xp, zeros_n(1, 1), zeros_n(1, 1), grid, marks,
                               sample_noise(grid, marks, 200, 1), [1.0], MeanFieldEstimator(PAIRWISE))
    euler = (1 + grid.dt) ** np.arange(grid.N + 1)
    assert np.allclose(x[:, :, 0].mean(axis=1), euler, rtol=1e-13)
    assert np.max(np.abs(x[:, :, 0].mean(axis=1) - np.exp(grid.nodes))) <= 3 * (grid.dt + 200 ** -0.5)


def test_geometric_mean_grows_at_drift_rate():
    mu, sig = 0.12, 0.3
    grid, marks = TimeGrid(1.0, 100), single_mark()
    P = 40_000
    x = simulate_mckean_vlasov(lambda t, x, xp: mu * x, lambda t, x, xp: sig * x[..., None], zeros_n(1, 1),
                               grid, marks, sample_noise(grid, marks, P, 2), [1.0], MeanFieldEstimator(AFFINE))
    ST = x[-1, :, 0]
    stderr = ST.std() / math.sqrt(P)
    assert abs(ST.mean() - math.exp(mu)) <= 5 * stderr + grid.dt * mu ** 2 * math.exp(mu)


def test_affine_and_pairwise_estimators_agree_exactly_for_affine_maps():
    grid, marks = TimeGrid(0.5, 10), MarkSpace([1.0, -0.5], [0.7, 0.4])
    noise = sample_noise(grid, marks, 300, 3)

    def b(t, x, xp):
        return -0.4 * x + 0.9 * xp + 0.1

    def s(t, x, xp):
        return (0.2 * x + 0.3 * xp)[..., None]

    def h(t, x, xp):
        first = np.broadcast_to(0.1 * xp, np.broadcast_shapes(x.shape, xp.shape))
        return np.concatenate([first, 0.05 * x - 0.2 * xp], axis=-1)[..., None, :]

    a = simulate_mckean_vlasov(b, s, h, grid, marks, noise, [1.0], MeanFieldEstimator(AFFINE))
    p = simulate_mckean_vlasov(b, s, h, grid, marks, noise, [1.0], MeanFieldEstimator(PAIRWISE, chunk=37))
    assert np.allclose(a, p, rtol=0, atol=1e-12)


def test_doubling_constant_drift_doubles_mean_increment():
    grid, marks = TimeGrid(1.0, 16), single_mark()
    noise = sample_noise(grid, marks, 100, 4)
    inc = []
    for c in (0.3, 0.6):
        x = simulate_mckean_vlasov(lambda t, x, xp, c=c: np.full(x.shape, c), lambda t, x, xp: np.ones(x.shape + (1,)),
                                   zeros_n(1, 1), grid, marks, noise, [0.0])
        inc.append(x[-1].mean() - x[0].mean())
    noise_part = noise.dB[:, :, 0].sum(axis=0).mean()
    assert (inc[1] - noise_part) == pytest.approx(2 * (inc[0] - noise_part), rel=1e-12)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_blow_up_is_reported():
    grid, marks = TimeGrid(1.0, 50), single_mark()
    with pytest.raises(NonFiniteState):
        simulate_mckean_vlasov(lambda t, x, xp: 1e300 * x * x, zeros_n(1, 1), zeros_n(1, 1), grid, marks,
                               sample_noise(grid, marks, 5, 0), [10.0])


def test_noise_for_other_marks_is_rejected():
    grid = TimeGrid(1.0, 5)
    with pytest.raises(ShapeMismatch):
        simulate_mckean_vlasov(zeros_n(1), zeros_n(1, 1), zeros_n(1, 1), grid, single_mark(),
                               sample_noise(grid, single_mark(2.0), 5, 0), [0.0])


def test_forward_given_backward_special_cases():
    marks = single_mark()
    grid = TimeGrid(0.5, 25)
    noise = sample_noise(grid, marks, 40, 5)
    coeffs = example_3_1(marks)
    inputs = ParticleEnsemble.constant(grid, marks, 40, [1.0], 1, 1)
    X, _ = forward_given_backward(coeffs, 0.0, 0.0, inputs, grid, marks, noise, [1.0])
    assert np.array_equal(X, np.ones_like(X))

    c = 0.8
    inputs.y[:] = c
    X, _ = forward_given_backward(coeffs, 0.0, 1.0, inputs, grid, marks, noise, [1.0])
    assert np.allclose(X[:, :, 0], (1.0 - 3 * c * grid.nodes)[:, None], rtol=0, atol=1e-13)

    pert = Perturbations(drift=lambda i, t: math.cos(t))
    X, _ = forward_given_backward(coeffs, 0.0, 0.0, inputs, grid, marks, noise, [1.0], perturb=pert)
    left_sum = 1.0 + np.concatenate([[0.0], np.cumsum(np.cos(grid.nodes[:-1]) * grid.dt)])
    assert np.allclose(X[:, 0, 0], left_sum, rtol=0, atol=1e-14)
    assert abs(X[-1, 0, 0] - (1.0 + math.sin(0.5))) <= grid.dt


def test_ensemble_norm_examples():
    grid, marks = TimeGrid(1.0, 10), MarkSpace([1.0, 2.0], [0.5, 1.5])
    a = ParticleEnsemble.constant(grid, marks, 7, [0.0, 0.0], 2, 1)
    assert ensemble_norm(a, a.copy()) == 0.0
    b = a.copy()
    b.x[..., 0] += 1.0
    assert ensemble_norm(a, b) == pytest.approx(2.0, rel=1e-14)


def test_ensemble_norm_against_loop_oracle():
    rng = np.random.default_rng(6)
    grid, marks = TimeGrid(0.7, 6), MarkSpace([1.0, 2.0], [0.5, 1.5])
    N1, P = 7, 5

    def rand_ens():
        return ParticleEnsemble(grid, marks, rng.normal(size=(N1, P, 2)), rng.normal(size=(N1, P, 1)),
                                rng.normal(size=(N1, P, 1, 3)), rng.normal(size=(N1, P, 1, 2)))

    a, b = rand_ens(), rand_ens()
    total = 0.0
    for p in range(P):
        acc = 0.0
        for i in range(grid.N):
            acc += sum((a.x[i, p, j] - b.x[i, p, j]) ** 2 for j in range(2)) * grid.dt
            acc += (a.y[i, p, 0] - b.y[i, p, 0]) ** 2 * grid.dt
            acc += sum((a.z[i, p, 0, j] - b.z[i, p, 0, j]) ** 2 for j in range(3)) * grid.dt
            acc += sum(marks.weights[j] * (a.k[i, p, 0, j] - b.k[i, p, 0, j]) ** 2 for j in range(2)) * grid.dt
        acc += sum((a.x[-1, p, j] - b.x[-1, p, j]) ** 2 for j in range(2))
        total += acc
    assert ensemble_norm(a, b) == pytest.approx(total / P, rel=1e-13)
    with pytest.raises(ShapeMismatch):
        ensemble_norm(a, ParticleEnsemble.constant(grid, marks, P, [0.0], 1, 3))


def test_mean_path_follows_reduced_ode():
    a, at = -0.5, 0.3
    dims = Dims(1, 1, 1, 1)
    marks = single_mark()
    grid = TimeGrid(1.0, 200)
    D = dims.flat_size
    own, primed = np.zeros((1, D)), np.zeros((1, D))
    own[0, 0], primed[0, 0] = a, at
    cs = linear_mf(dims, marks, b=(own, primed, None), sigma=(None, None, [0.4]), h=(None, None, [0.2]))
    P = 20_000
    x = simulate_mckean_vlasov(lambda t, x, xp: cs.b(t, _slot(x), _slot(xp)),
                               lambda t, x, xp: cs.sigma(t, _slot(x), _slot(xp)),
                               lambda t, x, xp: cs.h(t, _slot(x), _slot(xp)),
                               grid, marks, sample_noise(grid, marks, P, 7), [1.0], MeanFieldEstimator(AFFINE))
    err = np.max(np.abs(x[:, :, 0].mean(axis=1) - np.exp((a + at) * grid.nodes)))
    assert err <= 3 * (grid.dt + P ** -0.5)


def _slot(x):
    from mfjfbsde.coefficients import Slot
    b = x.shape[:-1]
    return Slot(x, np.zeros(b + (1,)), np.zeros(b + (1, 1)), np.zeros(b + (1, 1)))


def test_csv_export_round_trips(tmp_path):
    grid, marks = TimeGrid(1.0, 3), single_mark()
    ens = ParticleEnsemble.constant(grid, marks, 2, [1.0 / 3.0], 1, 1)
    ens.y[:] = np.pi
    ens.to_csv(tmp_path / "paths.csv")
    ens.means_to_csv(tmp_path / "means.csv")
    with open(tmp_path / "paths.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][:5] == ["particle", "node", "t", "x_1", "y_1"]
    assert len(rows) == 1 + 2 * 4
    assert float(rows[1][3]) == 1.0 / 3.0 and float(rows[1][4]) == np.pi
