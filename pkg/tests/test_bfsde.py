import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from blqstack.bfsde import (BfsdeSystem, certify, discounted_norm, picard_residual, picard_solve,
                            solve_linear)
from blqstack.constraints import FullSpace
from blqstack.core import build_grid, sample_ensemble
from blqstack.errors import InvalidArgument, NoConvergence
from blqstack.follower import GameCoefficients
from blqstack.leader import leader_system

GRID = build_grid(1.0, 100)
TWIN = dict(A=2.0, B1=0.3, B2=0.3, Q1=0.1, Q2=0.1, S1=0.1, S2=0.1, H1=0.1, H2=0.1, G1=4.0)


def test_discounted_norm_examples():
    zero = np.zeros((GRID.N + 1, 1))
    assert discounted_norm(zero, zero, [0.0], 0.0, GRID) == 0.0
    one = np.ones((GRID.N + 1, 1))
    assert abs(discounted_norm(one, zero, [0.0], 0.0, GRID) - 1.0) < 1e-12
    assert abs(discounted_norm(one, zero, [0.0], 1.0, GRID) - math.sqrt(1 - math.exp(-1))) < 1e-10


@given(st.floats(0, 3), st.floats(0.1, 5))
def test_discounted_norm_scales_and_decreases(rho, c):
    rng = np.random.default_rng(0)
    X = rng.normal(size=(4, GRID.N + 1, 2))
    Z = rng.normal(size=(4, GRID.N, 2))
    base = discounted_norm(X, Z, X[0, 0], rho, GRID)
    assert math.isclose(discounted_norm(c * X, c * Z, c * X[0, 0], rho, GRID), c * base,
                        rel_tol=1e-12)
    assert discounted_norm(X, Z, X[0, 0], rho + 1.0, GRID) <= base


def test_zero_system_converges_at_once():
    sys = BfsdeSystem.build(1, 1)
    res = picard_solve(sys, GRID, None, rho=0.0, tol=1e-12)
    assert res.trace.iterations <= 1 or res.trace.norms[0] == 0.0
    assert np.max(np.abs(res.X)) == 0.0 and np.max(np.abs(res.Y)) == 0.0


def test_decoupled_exponentials():
    a, c = -0.7, 0.4
    sys = BfsdeSystem.build(1, 1, bY=a, fX=c, h0=[1.0], g0=[2.0])
    res = picard_solve(sys, GRID, None, rho=0.0, tol=1e-12)
    t = GRID.nodes
    y, x = res.Y[0, :, 0], res.X[0, :, 0]
    assert np.max(np.abs(y - np.exp(a * t))) < 1e-6 or np.max(np.abs(y - np.exp(-a * t))) < 1e-6
    assert (np.max(np.abs(x - 2 * np.exp(c * (t - 1)))) < 1e-6
            or np.max(np.abs(x - 2 * np.exp(-c * (t - 1)))) < 1e-6)


def test_full_space_projection_matches_linear_solve():
    cc = GameCoefficients.constant(GRID, **TWIN)
    projected = leader_system(cc, 1.0, [1.0], FullSpace(1))
    linear = leader_system(cc, 1.0, [1.0])
    cert = certify(projected, grid=GRID)
    res = picard_solve(projected, GRID, None, rho=cert.rho, tol=1e-12)
    assert np.allclose(res.X0, solve_linear(linear, GRID).X0, atol=1e-6)


def test_certificate_examples():
    # rho* = sup lambda_max(-(A + A')/2), so A = -10 I gives rho* = 10 > -4 |C|^2
    hot = certify(GameCoefficients.constant(GRID, A=-10.0, C=1.0), "bfsde2")
    assert not hot.passed
    assert any(e["margin"] < 0 for e in hot.condition_log)
    cool = certify(GameCoefficients.constant(GRID, A=10.0, C=1.0), "bfsde2")
    assert cool.passed and cool.condition_log[-1]["margin"] == 6.0
    zero = certify(BfsdeSystem.build(2, 2), grid=GRID)
    assert zero.passed and all(v == 0.0 for v in zero.k.values())
    with pytest.raises(InvalidArgument):
        certify(zero, "unknown")


def test_contraction_observed_when_certified():
    cc = GameCoefficients.constant(GRID, **TWIN)
    sys = leader_system(cc, 1.0, [1.0])
    cert = certify(sys, grid=GRID)
    assert cert.passed
    res = picard_solve(sys, GRID, None, rho=cert.rho, tol=1e-12)
    assert res.trace.converged
    assert max(res.trace.ratios[1:]) <= cert.contraction_factor + 0.05


def test_fixed_point_residual():
    cc = GameCoefficients.constant(GRID, **TWIN)
    sys = leader_system(cc, 1.0, [1.0])
    rho = certify(sys, grid=GRID).rho
    tol = 1e-9
    res = picard_solve(sys, GRID, None, rho=rho, tol=tol)
    assert picard_residual(sys, res) < 2 * tol


def test_regression_degree_and_mean_field():
    grid = build_grid(1.0, 20)
    cc = GameCoefficients.constant(grid, **{**TWIN, "C": 0.5})
    sys = leader_system(cc, 1.0, [1.0])
    rho = certify(sys, grid=grid).rho
    ens = sample_ensemble(grid, 20_000, seed=3)
    one = picard_solve(sys, grid, ens, rho=rho, tol=1e-9, degree=1)
    two = picard_solve(sys, grid, ens, rho=rho, tol=1e-9, degree=2)
    se = np.maximum(one.x0_stderr, 1e-12)
    assert np.all(np.abs(one.X0 - two.X0) <= 3 * se)
    assert np.array_equal(one.mean_Z, one.Z.mean(axis=0))


def test_iteration_cap_reports_trace():
    cc = GameCoefficients.constant(GRID, **TWIN)
    sys = leader_system(cc, 1.0, [1.0])
    with pytest.raises(NoConvergence) as err:
        picard_solve(sys, GRID, None, rho=0.0, tol=1e-30, max_iter=2)
    assert "norms" in str(err.value.details) or err.value.details
