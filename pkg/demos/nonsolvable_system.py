"""Show that the non-monotone rotation system has no solution: the reduced
mean equations leave a fixed mismatch, and continuation reports it.

    python3 demos/nonsolvable_system.py
"""

import math

from mfjfbsde.coefficients import example_3_2
from mfjfbsde.fbsde_continuation import linear_mean_gap, solve_fbsde
from mfjfbsde.grids_marks import TimeGrid, sample_noise, single_mark


def main():
    T = 3 * math.pi / 4
    marks = single_mark()
    coeffs = example_3_2(marks)
    gap = linear_mean_gap(coeffs, T, [1.0])
    print(f"reduced mean system singular: {gap['singular']}, terminal mismatch {gap['gap']:.12f}")
    grid = TimeGrid(T, 100)
    rep = solve_fbsde(coeffs, [[1.0]], 1.0, grid, marks, sample_noise(grid, marks, 300, 11), x0=[1.0])
    print(f"continuation status {rep.status}, alpha reached {rep.alpha_reached:.3f}")


if __name__ == "__main__":
    main()
