"""Acceptance suite: one check per criterion, each printing a PASS/FAIL line."""

from __future__ import annotations

import time
from fractions import Fraction

import numpy as np
import pytest

from blqstack.bfsde import certify, picard_extrapolate, picard_solve, solve_linear
from blqstack.cli import finance_preset
from blqstack.constraints import (Box, ConstraintSpec, Feasibility, FullSpace, Halfspace, Point,
                                  classify_feasibility)
from blqstack.core import VectorPath, build_grid, sample_ensemble
from blqstack.follower import (GameCoefficients, TerminalControl, completion_of_squares,
                               perturbation_gain, solve_blq)
from blqstack.leader import (leader_system, solve_p1_pointwise, solve_p2_affine, solve_p_general,
                             verify_kkt)
from blqstack.oracle import convergence_table
from blqstack.riccati import (assemble_check_blocks, assemble_tilde_blocks, check_closed_form,
                              scalar_sre1_via_inverse, solve_decoupling_check,
                              solve_decoupling_tilde, solve_sre1, tilde_closed_form)


@pytest.fixture
def verdict(capsys):
    def emit(number: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
        assert ok, detail
    return emit


def smooth_control(rng, grid, dim=1, modes=4):
    t = grid.nodes
    vals = np.zeros((grid.N + 1, dim))
    for j in range(modes):
        vals += np.outer(np.sin((j + 1) * np.pi * t / grid.T + rng.uniform(0, 2 * np.pi)),
                         rng.normal(size=dim)) / (j + 1)
    return VectorPath(grid, vals[None])


def random_instance(rng, n, grid, C=0.0):
    def spd(scale):
        M = rng.normal(size=(n, n)) * scale
        return M @ M.T + 0.2 * np.eye(n)
    return GameCoefficients.constant(
        grid, n=n, A=rng.normal(size=(n, n)) * 0.3 - 0.3 * np.eye(n),
        B1=rng.normal(size=(n, n)) * 0.5, B2=rng.normal(size=(n, n)) * 0.5, C=C * np.eye(n),
        Q1=spd(0.3), Q2=spd(0.3), S1=spd(0.3), S2=spd(0.3), R11=spd(0.3) + np.eye(n),
        R22=spd(0.3) + np.eye(n), G1=spd(0.3) + np.eye(n), H1=spd(0.2), H2=spd(0.2))


def test_c01_scalar_riccati_closed_form(verdict):
    start = time.perf_counter()
    grid = build_grid(1.0, 200)
    cc = GameCoefficients.constant(grid, A=0.0, C=0.0, Q2=0.0, B2=1.0, R22=1.0, S2=1.0)
    P0 = float(solve_sre1(cc, M=1.0).P0[0, 0])
    Pinv = float(scalar_sre1_via_inverse(cc, M=1.0).P0[0, 0])
    elapsed = time.perf_counter() - start
    ok = abs(P0 - 0.5) <= 1e-8 and abs(Pinv - P0) <= 1e-7 and elapsed < 1.0
    verdict(1, ok, f"P(0)={P0:.12f}, inverse route {Pinv:.12f}, {elapsed:.3f}s")


def test_c02_fundamental_matrix_cross_check(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(20):
        n = 1 if i < 10 else 2
        cc = random_instance(rng, n, build_grid(1.0, 200))
        tb = assemble_tilde_blocks(cc)
        worst = max(worst, float(np.max(np.abs(tilde_closed_form(tb) - solve_decoupling_tilde(tb).P.values))))
        cb = assemble_check_blocks(cc, rng.normal(size=n), float(rng.uniform(0.2, 1.5)))
        direct = solve_decoupling_check(cb).riccati.P.values
        worst = max(worst, float(np.max(np.abs(check_closed_form(cb) - direct))))
    elapsed = time.perf_counter() - start
    verdict(2, worst <= 1e-6 and elapsed < 10.0, f"worst sup gap {worst:.2e} over 20 instances, {elapsed:.2f}s")


def test_c03_follower_stationarity_and_perturbation(verdict):
    rng = np.random.default_rng(3)
    grid = build_grid(1.0, 200)
    worst_resid, worst_gain = 0.0, np.inf
    for n in (1, 2):
        for _ in range(3):
            cc = random_instance(rng, n, grid)
            xi = TerminalControl.deterministic(rng.normal(size=n))
            u1 = smooth_control(rng, grid, n)
            sol = solve_blq(cc, xi, u1)
            worst_resid = max(worst_resid, sol.stationarity_residual)
    cc = random_instance(rng, 1, grid)
    xi = TerminalControl.deterministic([1.3])
    sol = solve_blq(cc, xi)
    for _ in range(100):
        gain = perturbation_gain(cc, sol, xi, smooth_control(rng, grid), 1e-3)
        worst_gain = min(worst_gain, gain)
    ok = worst_resid <= 1e-6 and worst_gain >= -1e-8
    verdict(3, ok, f"sup stationarity residual {worst_resid:.2e}, min gain {worst_gain:.2e}")


def test_c04_kkt_system(verdict):
    grid = build_grid(1.0, 200)
    base = GameCoefficients.constant(grid, A=0.2, B1=0.4, B2=0.4, Q1=0.3, Q2=0.3, H1=0.2, H2=0.5)
    specs = [
        ConstraintSpec(FullSpace(1), alpha=[1.0], beta=1.0, pointwise_enabled=False),
        ConstraintSpec(FullSpace(1), alpha=[1.0], beta=-0.5, pointwise_enabled=False),
        ConstraintSpec(Box([0.0], [2.0]), alpha=[1.0], beta=1.0),
        ConstraintSpec(Box([1.3], [2.0]), alpha=[1.0], beta=0.5),
    ]
    bad = []
    for spec in specs:
        solve = solve_p2_affine if not spec.pointwise_enabled else solve_p_general
        sol = solve(base, spec)
        rep = verify_kkt(sol, spec, coeffs=base)
        if not (rep["dual_ok"] and rep["primal_margin"] <= 1e-6 and abs(rep["slackness"]) <= 1e-8):
            bad.append((spec.beta, rep))
    degenerate = GameCoefficients.constant(grid, A=0.0, B1=0.0, B2=0.0)
    worst = 0.0
    for beta in np.linspace(-2.0, 2.0, 21):
        spec = ConstraintSpec(FullSpace(1), alpha=[1.0], beta=float(beta), pointwise_enabled=False)
        worst = max(worst, abs(solve_p2_affine(degenerate, spec).lam - max(beta, 0.0)))
    verdict(4, not bad and worst <= 1e-8,
            f"{len(specs) - len(bad)}/{len(specs)} equilibria pass, max |lambda - max(beta,0)| {worst:.1e}")


def test_c05_homogeneous_zero_multiplier(verdict):
    cfg = finance_preset("affine", beta=-0.5)
    coeffs = cfg.game()
    sol = solve_p2_affine(coeffs, cfg.constraint_spec(), ensemble=cfg.ensemble())
    sup = max(p.sup_norm() for p in sol.paths.values())
    sup = max(sup, float(np.max(np.abs(sol.mean_xi))))
    verdict(5, sol.lam == 0.0 and sup <= 1e-10, f"lambda={sol.lam}, largest path sup-norm {sup:.1e}")


ORACLE_BASE = dict(A=0.2, B1=0.4, B2=0.4, Q1=0.3, Q2=0.3, H1=0.2, H2=0.5, G1=1.0)


def oracle_cases(grid):
    def game(**kw):
        return GameCoefficients.constant(grid, **{**ORACLE_BASE, **kw})
    affine_only = dict(pointwise_enabled=False)
    return [
        ("P1", game(), ConstraintSpec(Box([1.0], [3.0]), affine_enabled=False)),
        ("P1", game(A=-0.3, G1=2.0), ConstraintSpec(Box([-1.5], [-0.5]), affine_enabled=False)),
        ("P2", game(), ConstraintSpec(FullSpace(1), alpha=[1.0], beta=-0.5, **affine_only)),
        ("P2", game(), ConstraintSpec(FullSpace(1), alpha=[1.0], beta=1.0, **affine_only)),
        ("P2", game(A=-0.2, B2=0.3, Q2=0.5), ConstraintSpec(FullSpace(1), alpha=[2.0], beta=0.7, **affine_only)),
        ("P2", game(A=0.3, G1=1.5), ConstraintSpec(FullSpace(1), alpha=[-1.0], beta=0.4, **affine_only)),
        ("P", game(), ConstraintSpec(Box([0.0], [2.0]), alpha=[1.0], beta=1.0)),
        ("P", game(), ConstraintSpec(Box([1.3], [2.0]), alpha=[1.0], beta=0.5)),
        ("P", game(A=0.1, Q1=0.5), ConstraintSpec(Box([-2.0], [0.8]), alpha=[1.0], beta=0.6)),
        ("P", game(H2=0.8), ConstraintSpec(Box([0.5], [1.5]), alpha=[1.0], beta=1.2)),
    ]


def test_c06_oracle_equivalence(verdict):
    start = time.perf_counter()
    grid = build_grid(1.0, 400)
    solvers = {"P1": solve_p1_pointwise, "P2": solve_p2_affine, "P": solve_p_general}
    branches, worst_gap, slopes, failures = set(), 0.0, [], []
    for label, coeffs, spec in oracle_cases(grid):
        sol = solvers[label](coeffs, spec)
        branches.add((label, sol.branch))
        for metric in ("J1_gap", "J2_gap"):
            table = convergence_table(sol, coeffs, spec, metric=metric)
            last = table.rows[-1]
            gap = last.J1_rel if metric == "J1_gap" else last.J2_rel
            worst_gap = max(worst_gap, gap)
            if table.fitted:
                slopes.append(table.slope)
                if abs(table.slope - 1.0) > 0.3:
                    failures.append((label, metric, table.slope))
            if gap > 1e-3:
                failures.append((label, metric, gap))
    elapsed = time.perf_counter() - start
    covered = {("P2", "Zero"), ("P2", "Positive"), ("P1", "PointwiseOnly")} <= branches
    ok = not failures and covered and elapsed < 60.0
    verdict(6, ok, f"worst relative gap at N=128 {worst_gap:.2e}, slopes in "
                   f"[{min(slopes):.3f}, {max(slopes):.3f}], {elapsed:.1f}s")


def test_c07_projection_laws(verdict):
    rng = np.random.default_rng(7)
    sets = [Box([-1.0, 0.0], [1.0, 2.0]), Box([0.0, -np.inf], [np.inf, 0.5]),
            Halfspace([1.0, -2.0], 0.3), Point([0.4, -0.1]), FullSpace(2)]
    violations = 0
    for _ in range(1000):
        K = sets[rng.integers(len(sets))]
        L = rng.normal(size=(2, 2))
        G = L @ L.T + 0.1 * np.eye(2)
        x, y = rng.normal(scale=2.0, size=(2, 2))
        px, py = K.project(x, G), K.project(y, G)
        if not np.array_equal(K.project(px, G), px):
            violations += 1
        d, e = px - py, x - y
        if d @ G @ d > e @ G @ e * (1 + 1e-12) + 1e-14:
            violations += 1
        mid = 0.5 * (px + py)
        if not K.contains(px) or np.max(np.abs(K.project(mid, G) - mid)) > 1e-12:
            violations += 1
    verdict(7, violations == 0, f"{violations} violations over 1000 random pairs")


def expected_interval_class(a, b, alpha, beta):
    """Geometry of {x in [a, b] : alpha x >= beta}: lo/hi are the values of
    alpha x at the two ends of K."""
    lo, hi = sorted((alpha * a, alpha * b))
    if lo == hi:
        return Feasibility.DEGENERATED_BREADTH, (Feasibility.POINTWISE_ONLY if beta <= hi else Feasibility.EMPTY)
    if beta > hi:
        return Feasibility.EMPTY, Feasibility.EMPTY
    if beta == hi:
        return Feasibility.EXPOSED_FACE, Feasibility.EXPOSED_FACE
    if beta <= lo:
        return Feasibility.POINTWISE_ONLY, Feasibility.POINTWISE_ONLY
    return Feasibility.NONTRIVIAL_BOTH, Feasibility.NONTRIVIAL_BOTH


def test_c08_feasibility_taxonomy(verdict):
    intervals = [(0.0, 1.0), (-2.0, 3.0), (1.0, 1.0), (-np.inf, 2.0), (0.0, np.inf), (-np.inf, np.inf),
                 (-1.0, -1.0)]
    cases = mismatches = 0
    for a, b in intervals:
        K = FullSpace(1) if np.isinf(a) and np.isinf(b) else Box([a], [b])
        for alpha in (1.0, -2.0):
            for beta in (-5.0, -2.0, -1.0, 0.0, 0.5, 1.0, 2.0, 4.0):
                v = classify_feasibility(ConstraintSpec(K, alpha=[alpha], beta=beta))
                cases += 1
                if (v.cls, v.outcome) != expected_interval_class(a, b, alpha, beta):
                    mismatches += 1
    verdict(8, cases >= 50 and mismatches == 0, f"{mismatches} misclassifications over {cases} cases")


def test_c09_completion_of_squares(verdict):
    rng = np.random.default_rng(9)
    grid = build_grid(1.0, 400)
    cc = GameCoefficients.constant(grid, A=0.4, B2=0.8, C=0.3, Q2=0.5, S2=0.2, H2=0.3, R22=1.3)
    worst = 0.0
    for _ in range(20):
        direct, completed = completion_of_squares(cc, smooth_control(rng, grid))
        worst = max(worst, abs(direct - completed))
    verdict(9, worst <= 1e-6, f"max |direct - completed| {worst:.2e} over 20 controls")


def test_c10_picard_contraction(verdict):
    start = time.perf_counter()
    cc = GameCoefficients.constant(build_grid(1.0, 100), A=2.0, B1=0.3, B2=0.3, C=0.5, Q1=0.1,
                                   Q2=0.1, S1=0.1, S2=0.1, H1=0.1, H2=0.1, G1=4.0)
    grid = cc.grid
    system = leader_system(cc, 1.0, [1.0])
    cert = certify(system, grid=grid)
    exact = solve_linear(system, grid).X0
    ens = sample_ensemble(grid, 100_000, seed=11)
    ext = picard_extrapolate(system, grid, ens, rho=cert.rho, degree=1, tol=1e-9)
    z = (ext.value - exact) / ext.stderr
    ratios = ext.fine.trace.ratios + ext.coarse.trace.ratios
    excess = max(ratios) - cert.contraction_factor
    # a diffusion-free twin exercises the deterministic sweep against its own certificate
    twin = leader_system(GameCoefficients.constant(grid, A=2.0, B1=0.3, B2=0.3, Q1=0.1, Q2=0.1,
                                                   S1=0.1, S2=0.1, H1=0.1, H2=0.1, G1=4.0), 1.0, [1.0])
    twin_cert = certify(twin, grid=grid)
    ode = picard_solve(twin, grid, None, rho=twin_cert.rho, tol=1e-12)
    excess = max(excess, max(ode.trace.ratios) - twin_cert.contraction_factor)
    elapsed = time.perf_counter() - start
    ok = (cert.passed and twin_cert.passed and excess <= 0.05
          and bool(np.all(np.abs(z) <= 3.0)) and elapsed < 120.0)
    verdict(10, ok, f"factor {cert.contraction_factor:.3f}, worst ratio excess {excess:+.3f}, "
                    f"z-scores {np.round(z, 2).tolist()}, {elapsed:.1f}s")


def test_c11_explicit_theta_arithmetic(verdict):
    consts = dict(rho1=-10, k5=1, k6=0, k9=0.1, k4=0.5, k1=0.1, k10=0.1)
    cert = certify(None, "remark61", epsilon=1.0, constants=consts)
    F = Fraction
    rho1, k5, k6, eps = F(-10), F(1), F(0), F(1)
    k9, k4, k1, k10 = F(1, 10), F(1, 2), F(1, 10), F(1, 10)
    d = -4 * rho1 - 4 * k5 ** 2 - 3 * eps
    theta = (2 / d + 5 + (2 * k5 ** 2 + 2 * k6 ** 2) / eps) * (2 * k9 ** 2 + 2 * k4 ** 2 / (eps * d))
    conditions = [4 * rho1 < -4 * k5 ** 2 - 3 * eps, k9 ** 2 * theta < 1, k10 ** 2 * theta < 1,
                  k1 ** 2 * theta / eps < 1]
    ok = abs(cert.theta - float(theta)) <= 1e-6 and all(conditions) and cert.passed
    verdict(11, ok, f"theta {cert.theta:.10f} vs hand value {float(theta):.10f}, verdict {cert.verdict}")
