"""Mean-variance portfolio with jumps: Riccati coefficients, the feedback
investment law, and a maximum principle check along the optimal paths.

    python3 demos/portfolio_feedback.py [--particles 20000]
"""

import argparse

import numpy as np

from mfjfbsde import registry
from mfjfbsde.applications import portfolio_candidate, portfolio_feedback, portfolio_problem, portfolio_riccati
from mfjfbsde.bsde_backward import AFFINE_EXACT, RegressionConfig
from mfjfbsde.fbsde_continuation import ContinuationConfig
from mfjfbsde.grids_marks import TimeGrid, sample_noise, single_mark
from mfjfbsde.maximum_principle import smp_residual, solve_adjoint, solve_controlled_fbsde


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--particles", type=int, default=20_000)
    args = ap.parse_args()

    marks = single_mark()
    mp = registry.market_params(marks)
    ric = portfolio_riccati(mp, TimeGrid(mp.T, 10_000))
    print(f"{'t':>5} {'phi':>10} {'psi':>10} {'p':>10}   u(t, x) at x = 0.5, 1, 2")
    for t in np.linspace(0.0, mp.T, 6):
        u = portfolio_feedback(ric, mp, t, np.array([0.5, 1.0, 2.0]))
        print(f"{t:5.2f} {float(ric.at('phi', t)):10.5f} {float(ric.at('psi', t)):10.5f} "
              f"{float(ric.at('p', t)):10.5f}   " + " ".join(f"{v:8.4f}" for v in np.ravel(u)))

    grid = TimeGrid(mp.T, 100)
    noise = sample_noise(grid, marks, args.particles, 1, centered=True)
    config = ContinuationConfig(regression=RegressionConfig(mode=AFFINE_EXACT))
    problem = portfolio_problem(mp)
    paths = solve_controlled_fbsde(problem, portfolio_candidate(ric, mp), grid, marks, noise, config)
    rep = smp_residual(problem, paths, None, solve_adjoint(problem, paths, None, noise, config))
    print(f"maximum principle: min residual {rep.minimum:.2e}, tolerance {rep.tol:.2e}, pass {rep.passed}")


if __name__ == "__main__":
    main()
