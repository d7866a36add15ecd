import math

import numpy as np
import pytest
from conftest import random_game, smooth_path
from hypothesis import given, strategies as st

from blqstack.core import VectorPath, build_grid, sample_ensemble
from blqstack.errors import InvalidArgument, NotConvex
from blqstack.follower import (GameCoefficients, TerminalControl, completion_of_squares,
                               evaluate_costs, gateaux_check, perturbation_gain, solve_blq)
from blqstack.oracle import DiscreteGame, oracle_follower

GRID = build_grid(1.0, 200)


def test_no_follower_control():
    cc = GameCoefficients.constant(GRID, A=0.4, B1=0.7, B2=0.0, Q2=0.3)
    xi = TerminalControl.deterministic([1.5])
    u1 = smooth_path(np.random.default_rng(0), GRID)
    sol = solve_blq(cc, xi, u1)
    assert np.max(np.abs(sol.u2.values)) < 1e-14
    alone = evaluate_costs(cc, xi, u1, None)
    assert np.allclose(sol.X.values[0], alone.X[0], atol=1e-8)


def test_homogeneous_instance_is_zero():
    cc = random_game(np.random.default_rng(1), 2, GRID)
    sol = solve_blq(cc, TerminalControl.deterministic([0.0, 0.0]))
    assert np.max(np.abs(sol.u2.values)) == 0.0 and sol.J2 == 0.0


def test_agrees_with_discrete_oracle():
    grid = build_grid(1.0, 64)
    cc = GameCoefficients.constant(grid, A=0.0, B2=1.0, C=0.0, Q2=0.0, S2=1.0, R22=1.0, H2=0.0)
    sol = solve_blq(cc, TerminalControl.deterministic([1.0]))
    u2, J2 = oracle_follower(DiscreteGame.from_coefficients(cc, 64), [1.0])
    assert sol.J2 == J2 == 0.0
    assert np.max(np.abs(u2)) == 0.0 and np.max(np.abs(sol.u2.values)) == 0.0


def test_oracle_gap_is_first_order():
    gaps, costs = [], []
    for N in (64, 128):
        cc = GameCoefficients.constant(build_grid(1.0, N), A=0.0, B2=1.0, Q2=0.3, S2=1.0, H2=0.5)
        sol = solve_blq(cc, TerminalControl.deterministic([1.0]))
        u2, J2 = oracle_follower(DiscreteGame.from_coefficients(cc, N), [1.0])
        gaps.append(np.max(np.abs(sol.u2.values[0, :-1] - u2)) / np.max(np.abs(u2)))
        costs.append(J2)
    assert gaps[1] < 3.2e-3 and 1.8 < gaps[0] / gaps[1] < 2.2
    assert abs((2 * costs[1] - costs[0]) - sol.J2) <= 1e-5 * sol.J2


def test_evaluate_costs_examples():
    grid = build_grid(1.0, 50)
    zero = GameCoefficients.constant(grid, B1=0.0, B2=0.0, G1=0.0)
    assert tuple(evaluate_costs(zero, TerminalControl.deterministic([0.0]))[:2]) == (0.0, 0.0)
    cc = GameCoefficients.constant(grid, A=0.0, B1=0.0, B2=0.0, Q1=2.0, G1=1.0, H1=3.0)
    costs = evaluate_costs(cc, TerminalControl.deterministic([1.0]))
    assert abs(costs.J1 - 3.0) < 1e-12
    with pytest.raises(InvalidArgument):
        evaluate_costs(cc, TerminalControl.deterministic([1.0, 2.0]))


def test_monte_carlo_stderr_scaling():
    grid = build_grid(1.0, 10)
    cc = GameCoefficients.constant(grid, A=0.3, B2=0.5, C=0.4, Q2=0.5, S2=0.2, H2=0.3)
    xi = TerminalControl.linear_in_w([1.0], [[0.8]])
    Ms = (1_000, 10_000, 100_000)
    se = [evaluate_costs(cc, xi, None, None, ensemble=sample_ensemble(grid, M, 5), degree=1).J2_stderr
          for M in Ms]
    slope = np.polyfit(np.log(Ms), np.log(se), 1)[0]
    assert abs(slope + 0.5) < 0.1


def test_gateaux_toys():
    assert abs(gateaux_check(lambda u: u @ u, [0.0], [1.0])) < 1e-10
    assert abs(gateaux_check(lambda u: u @ u, [1.0], [1.0]) - 2.0) < 1e-8
    with pytest.raises(InvalidArgument):
        gateaux_check(lambda u: u @ u, [1.0], [1.0], feasible=lambda u: u[0] <= 1.0)


def test_gateaux_vanishes_at_optimum():
    rng = np.random.default_rng(7)
    cc = random_game(rng, 1, GRID)
    xi = TerminalControl.deterministic([1.2])
    sol = solve_blq(cc, xi)
    base = sol.u2.values[0]
    for _ in range(20):
        v = smooth_path(rng, GRID).values[0]

        def cost(c):
            return evaluate_costs(cc, xi, None, VectorPath(GRID, (base + c[0] * v)[None])).J2

        assert abs(gateaux_check(cost, [0.0], [1.0], eps=1e-3)) <= 1e-5


@pytest.mark.parametrize("seed", range(3))
def test_terminal_match_and_initial_coupling(seed):
    rng = np.random.default_rng(seed)
    cc = random_game(rng, 2, GRID)
    xi = TerminalControl.deterministic(rng.normal(size=2))
    sol = solve_blq(cc, xi, smooth_path(rng, GRID, 2))
    assert np.allclose(sol.X.values[:, -1], xi.xi0, atol=1e-10)
    assert np.allclose(sol.Y.values[:, 0], sol.X.values[:, 0] @ cc.H2.T, atol=1e-9)
    assert sol.stationarity_residual <= 1e-6


@given(st.integers(0, 10_000))
def test_optimum_beats_zero_control(seed):
    rng = np.random.default_rng(seed)
    cc = random_game(rng, 1, build_grid(1.0, 60))
    xi = TerminalControl.deterministic(rng.normal(size=1))
    u1 = smooth_path(rng, cc.grid)
    sol = solve_blq(cc, xi, u1)
    assert sol.J2 <= evaluate_costs(cc, xi, u1, None).J2 + 1e-9


def test_exact_perturbation_gain_matches_resimulation():
    rng = np.random.default_rng(4)
    cc = random_game(rng, 1, GRID)
    xi = TerminalControl.deterministic([0.7])
    sol = solve_blq(cc, xi)
    v = smooth_path(rng, GRID)
    eps = 0.1
    moved = VectorPath(GRID, sol.u2.values + eps * v.values)
    direct = evaluate_costs(cc, xi, None, moved).J2 - evaluate_costs(cc, xi, None, sol.u2).J2
    assert abs(perturbation_gain(cc, sol, xi, v, eps) - direct) < 1e-7


def test_not_convex_is_refused():
    cc = GameCoefficients.constant(GRID, A=0.0, B2=1.0, S2=1.0, H2=-5.0)
    with pytest.raises(NotConvex):
        solve_blq(cc, TerminalControl.deterministic([1.0]))


@given(st.integers(0, 10_000))
def test_completion_of_squares(seed):
    rng = np.random.default_rng(seed)
    cc = random_game(rng, 1, build_grid(1.0, 100), C=0.5)
    direct, completed = completion_of_squares(cc, smooth_path(rng, cc.grid))
    assert abs(direct - completed) <= 1e-6 * max(1.0, abs(direct))
    assert math.isfinite(direct)
