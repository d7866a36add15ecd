import math

import numpy as np
import pytest
from conftest import random_game
from hypothesis import given, strategies as st
from scipy.linalg import expm

from blqstack.core import build_grid
from blqstack.errors import ConstraintViolation, InvalidArgument, RepresentationFailure
from blqstack.follower import GameCoefficients
from blqstack.riccati import (assemble_check_blocks, assemble_tilde_blocks, check_closed_form,
                              follower_convexity_certificate, leader_convexity_certificate,
                              riccati_closed_form, scalar_sre1_via_inverse, solve_decoupling_check,
                              solve_decoupling_tilde, solve_sre1, solve_sre2, tilde_closed_form)

GRID = build_grid(1.0, 100)


def separable(grid=GRID, **kw):
    return GameCoefficients.constant(grid, **{"A": 0.0, "C": 0.0, "Q2": 0.0, "B2": 1.0,
                                              "R22": 1.0, "S2": 1.0, **kw})


def test_sre1_closed_forms():
    assert abs(solve_sre1(separable(), M=1.0).P0[0, 0] - 0.5) < 1e-8
    pure = GameCoefficients.constant(GRID, Q2=1.0, S2=1.0)
    assert abs(solve_sre1(pure, M=0.0).P0[0, 0] - 1.0) < 1e-10


def test_sre1_terminal_positivity_violation():
    with pytest.raises(ConstraintViolation) as err:
        solve_sre1(GameCoefficients.constant(GRID, Q2=1.0), M=0.0)
    assert err.value.details["time"] == 1.0


def test_inverse_route():
    sol = scalar_sre1_via_inverse(separable(), M=1.0)
    assert abs(sol.P0[0, 0] - 0.5) < 1e-8
    assert math.isclose(sol.extras["c1"], 2.0, rel_tol=1e-12)
    assert np.all(sol.extras["y"] <= 2.0 + 1e-12)
    flat = scalar_sre1_via_inverse(GameCoefficients.constant(GRID, S2=1.0), M=3.0)
    assert np.allclose(flat.extras["y"], 1 / 3, atol=1e-15)
    assert np.allclose(flat.P.values, 3.0, atol=1e-12)
    with pytest.raises(InvalidArgument):
        scalar_sre1_via_inverse(separable(), M=-1.0)


@given(st.floats(0.0, 0.8), st.floats(0.0, 1.0), st.floats(0.1, 1.0), st.floats(0.0, 1.0),
       st.floats(0.1, 2.0))
def test_inverse_route_agrees_with_direct(A, C, B2, Q2, M):
    cc = GameCoefficients.constant(build_grid(1.0, 80), A=A, C=C, B2=B2, Q2=Q2, S2=0.5)
    direct = solve_sre1(cc, M=M).P.values[:, 0, 0]
    inverse = scalar_sre1_via_inverse(cc, M=M).P.values[:, 0, 0]
    assert np.max(np.abs(direct - inverse)) < 1e-6 * (1 + np.abs(direct).max())


def test_sre1_monotone_in_terminal_value():
    cc = GameCoefficients.constant(GRID, A=0.3, C=0.4, B2=0.7, Q2=0.5, S2=0.3)
    P0 = [solve_sre1(cc, M=M).P0[0, 0] for M in np.linspace(0.05, 4.0, 15)]
    assert np.all(np.diff(P0) >= -1e-12)


def test_sre2_zero_dynamics_is_constant():
    cc = GameCoefficients.constant(GRID, A=0.0, B1=0.0, B2=0.0, S1=0.7, G1=2.0)
    sol = solve_sre2(cc)
    assert np.allclose(sol.P.values, np.diag([0.0, 2.0]), atol=1e-14)
    assert np.array_equal(sol.P.values[-1][:1, :1], np.zeros((1, 1)))


def test_sre2_lyapunov_closed_form():
    cc = GameCoefficients.constant(GRID, A=0.4, B1=0.0, B2=0.0, R22=1e12, G1=1.5)
    sol = solve_sre2(cc)
    AA = np.array([[-0.4, 0.0], [0.0, 0.4]])
    G = np.diag([0.0, 1.5])
    for k in (0, 37, 100):
        Phi = expm(AA * (1.0 - GRID.nodes[k]))
        assert np.allclose(sol.P.values[k], Phi.T @ G @ Phi, atol=1e-9)


def test_leader_certificate():
    cc = GameCoefficients.constant(GRID, A=0.2, B1=0.5, B2=0.5, Q1=0.3, Q2=0.3, S1=0.2, S2=0.2)
    sre2 = solve_sre2(cc)
    assert leader_convexity_certificate(sre2, 0.0)
    p = float(sre2.P0[1, 1])
    assert not leader_convexity_certificate(sre2, -2 * p - 1)
    zero = solve_sre2(GameCoefficients.constant(GRID, B1=0.0, B2=0.0, G1=1e-30, S1=1.0))
    assert leader_convexity_certificate(zero, 0.0).margin == pytest.approx(0.0, abs=1e-12)


def test_follower_certificate():
    sre1 = solve_sre1(separable(), M=1.0)
    assert follower_convexity_certificate(sre1, 0.0)
    assert not follower_convexity_certificate(sre1, -0.6)
    boundary = follower_convexity_certificate(sre1, -sre1.P0)
    assert boundary.ok and abs(boundary.margin) < 1e-14


def test_tilde_blocks_examples():
    cc = GameCoefficients.constant(GRID, A=0.3, B1=0.5, B2=0.4, Q1=0.2, Q2=0.1, G1=2.0)
    b = assemble_tilde_blocks(cc)
    assert np.allclose(b.G_tilde, -np.diag([0.5, 0.0]))
    assert np.allclose(b.at(0.0)["A_tilde"], 0.3 * np.eye(2))
    one = assemble_tilde_blocks(GameCoefficients.constant(GRID, H1=1.0))
    assert one.G_tilde[0, 0] == -0.5
    with pytest.raises(InvalidArgument):
        assemble_tilde_blocks(GameCoefficients.constant(GRID, H1=-1.0))


@given(st.integers(0, 10_000), st.integers(1, 2))
def test_tilde_symmetry_identity(seed, n):
    cc = random_game(np.random.default_rng(seed), n, GRID, C=0.4)
    b = assemble_tilde_blocks(cc).at(0.3)
    assert np.max(np.abs(b["B_hat"] - b["A_tilde"].T)) <= 1e-15 * (1 + np.abs(b["B_hat"]).max())
    assert np.allclose(b["A_hat"], b["A_hat"].T) and np.allclose(b["B_tilde"], b["B_tilde"].T)


def test_tilde_trivial_and_separable():
    zero = GameCoefficients.constant(GRID, A=0.0, B1=0.0, B2=0.0)
    sol = solve_decoupling_tilde(assemble_tilde_blocks(zero))
    assert np.allclose(sol.P.values, assemble_tilde_blocks(zero).G_tilde, atol=0)
    # P' = -P^2, P(1) = -1 gives P(t) = 1 / (t - 2)
    out = riccati_closed_form(lambda t: np.array([[0.0, 1.0], [0.0, 0.0]]), np.array([[-1.0]]), GRID)
    assert abs(out[0, 0, 0] + 0.5) < 1e-8
    # P' = +P^2 with the same terminal value is -1/t, singular at the initial time
    with pytest.raises(RepresentationFailure):
        riccati_closed_form(lambda t: np.array([[0.0, -1.0], [0.0, 0.0]]), np.array([[-1.0]]), GRID)


@pytest.mark.parametrize("seed", range(4))
def test_tilde_closed_form_matches_integration(seed):
    cc = random_game(np.random.default_rng(seed), 2, GRID)
    blocks = assemble_tilde_blocks(cc)
    direct = solve_decoupling_tilde(blocks)
    closed = tilde_closed_form(blocks)
    assert np.max(np.abs(direct.P.values - closed)) < 1e-6


@pytest.mark.parametrize("seed", range(3))
def test_symmetry_preserved(seed):
    cc = random_game(np.random.default_rng(seed), 2, GRID, C=0.3)
    for sol in (solve_sre1(cc), solve_sre2(cc), solve_decoupling_tilde(assemble_tilde_blocks(cc))):
        V = sol.P.values
        assert np.max(np.abs(V - np.swapaxes(V, 1, 2))) <= 1e-12


def test_residual_refinement():
    cc = GameCoefficients.constant(build_grid(1.0, 20), A=0.5, C=0.6, B2=1.2, Q2=0.4, S2=0.3)
    coarse = solve_sre1(cc, M=2.0).residual_sup
    fine = solve_sre1(cc.regrid(build_grid(1.0, 40)), M=2.0).residual_sup
    assert 10 < coarse / fine < 24


def test_check_blocks_terminal_and_zero_forcing():
    cc = GameCoefficients.constant(GRID, A=0.2, B1=0.4, B2=0.3, Q1=0.2, Q2=0.1, G1=2.0)
    blocks = assemble_check_blocks(cc, [1.0], 0.0)
    assert np.allclose(blocks.P_terminal, blocks.G_check)
    sol = solve_decoupling_check(blocks)
    assert np.array_equal(sol.p.values, np.zeros_like(sol.p.values))


def test_check_block_pattern_scalar():
    c = GameCoefficients.constant(GRID, A=0.7, B1=2.0, B2=3.0, C=0.5, Q1=0.11, Q2=0.13,
                                  S1=0.17, S2=0.19, R11=1.0, R22=2.0).snapshot(0.0)
    blocks = assemble_check_blocks(
        GameCoefficients.constant(GRID, A=0.7, B1=2.0, B2=3.0, C=0.5, Q1=0.11, Q2=0.13,
                                  S1=0.17, S2=0.19, R22=2.0), [1.0], 0.3).at(0.0)
    N1, N2 = 4.0, 4.5
    assert np.allclose(blocks["A"], 0.7 * np.eye(4))
    assert np.allclose(blocks["B"], [[-0.11, 0, -0.13, 0], [0, -0.11, 0, -0.13],
                                     [-0.13, 0, 0, 0], [0, -0.13, 0, 0]])
    assert np.allclose(blocks["A2"], [[N1, 0, N2, 0], [0, N1, 0, N2], [N2, 0, 0, 0], [0, N2, 0, 0]])
    assert np.allclose(blocks["C2"], np.diag([0, 0.5, 0, 0.5]))
    assert np.allclose(blocks["D2"], [[0, 0.5, 0, 0], [0, -0.5, 0, 0], [0, 0, 0, 0.5],
                                      [0, 0, 0, -0.5]])
    assert np.allclose(blocks["B1"], [[0, 0, 0, 0], [0, -0.17, 0, -0.19], [0, 0, 0, 0],
                                      [0, -0.19, 0, 0]])
    assert float(c.N1[0, 0]) == N1 and float(c.N2[0, 0]) == N2


def test_check_closed_form_matches_integration():
    cc = random_game(np.random.default_rng(8), 1, GRID)
    blocks = assemble_check_blocks(cc, [1.0], 0.4)
    direct = solve_decoupling_check(blocks).riccati.P.values
    assert np.max(np.abs(direct - check_closed_form(blocks))) < 1e-6
