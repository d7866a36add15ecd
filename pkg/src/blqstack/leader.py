"""The leader's problem under pointwise and expectation constraints on ξ and
assembly of the Stackelberg equilibrium."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy.linalg import block_diag

from .bfsde import BfsdeSystem, LinearSolution, certify, picard_solve, solve_linear
from .constraints import (ConstraintSpec, Feasibility, FullSpace, classify_feasibility,
                          project_rows)
from .core import ScenarioEnsemble, TimeGrid, VectorPath, time_integral
from .errors import (InvalidArgument, KKTBracketFailure, KKTIndeterminate, NotConvex, Refused,
                     SolverError)
from .follower import GameCoefficients, TerminalControl
from .riccati import (assemble_check_blocks, assemble_tilde_blocks, follower_convexity_certificate,
                      leader_convexity_certificate, solve_decoupling_check, solve_decoupling_tilde,
                      solve_sre1, solve_sre2)

log = logging.getLogger(__name__)

LAMBDA_CAP = 2.0 ** 16


@dataclass(frozen=True)
class KKTBranchDiagnostics:
    zero_branch: dict
    positive_branch: dict
    chosen: str

    def to_dict(self):
        return {"zero_branch": self.zero_branch, "positive_branch": self.positive_branch,
                "chosen": self.chosen}


@dataclass(frozen=True, eq=False)
class EquilibriumSolution:
    lam: float
    g: VectorPath
    Ybar: VectorPath
    Xbar: VectorPath
    Zbar: VectorPath
    h: VectorPath
    q: VectorPath
    xi: TerminalControl
    u1: VectorPath
    u2: VectorPath
    J1: float
    J2: float
    kkt_report: dict
    branch: str
    grid: TimeGrid
    mean_xi: np.ndarray
    diagnostics: Optional[KKTBranchDiagnostics] = None
    certificates: dict = field(default_factory=dict)
    unique: bool = False
    paths_are_means: bool = False
    notes: List[str] = field(default_factory=list)
    extras: dict = field(default_factory=dict)

    @property
    def paths(self):
        return {"g": self.g, "Ybar": self.Ybar, "Xbar": self.Xbar, "Zbar": self.Zbar,
                "h": self.h, "q": self.q, "u1": self.u1, "u2": self.u2}

    def to_dict(self):
        return {
            "lambda": self.lam, "branch": self.branch, "J1": self.J1, "J2": self.J2,
            "mean_xi": self.mean_xi.tolist(), "xi": self.xi.to_dict(),
            "kkt": self.kkt_report, "unique": self.unique, "paths_are_means": self.paths_are_means,
            "diagnostics": None if self.diagnostics is None else self.diagnostics.to_dict(),
            "certificates": self.certificates, "notes": list(self.notes),
        }


# ---------------------------------------------------------------------------
# the stacked leader system


def leader_system(coeffs: GameCoefficients, lam: float = 0.0, alpha=None, K=None,
                  terminal: Optional[np.ndarray] = None) -> BfsdeSystem:
    """Forward (g, Ȳ), backward (X̄, h), diffusion (Z̄, q).

    By default X̄(T) = G1^{-1}(-g(T) + λα), projected onto ``K`` in the G1
    metric when a set is given. ``terminal`` prescribes X̄(T) instead.
    """
    n = coeffs.n
    Zn = np.zeros((n, n))
    G1inv = np.linalg.inv(coeffs.G1)
    alpha = np.zeros(n) if alpha is None else np.asarray(alpha, dtype=float).reshape(n)
    snap = coeffs.snapshot
    kw = dict(
        bY=lambda t: -block_diag(snap(t).A.T, snap(t).A.T),
        bX=lambda t: np.block([[snap(t).Q1, snap(t).Q2], [snap(t).Q2, Zn]]),
        sY=lambda t: -block_diag(snap(t).C.T, snap(t).C.T),
        sZ=lambda t: np.block([[snap(t).S1, snap(t).S2], [snap(t).S2, Zn]]),
        fY=lambda t: np.block([[snap(t).N1, snap(t).N2], [snap(t).N2, Zn]]),
        fX=lambda t: block_diag(snap(t).A, snap(t).A),
        fZ=lambda t: block_diag(snap(t).C, snap(t).C),
    )
    H = np.block([[coeffs.H1, coeffs.H2], [coeffs.H2, Zn]])
    if terminal is not None:
        g0 = np.concatenate([np.asarray(terminal, dtype=float).reshape(n), np.zeros(n)])
        return BfsdeSystem.build(2 * n, 2 * n, H=H, g0=g0, label="leader-fixed-terminal", **kw)
    G = block_diag(-G1inv, Zn)
    g0 = np.concatenate([lam * G1inv @ alpha, np.zeros(n)])
    base = BfsdeSystem.build(2 * n, 2 * n, H=H, G=G, g0=g0, label="leader", **kw)
    if K is None or isinstance(K, FullSpace):
        return base
    w = np.linalg.eigvalsh(coeffs.G1)
    lip = float(np.linalg.norm(G1inv)) * math.sqrt(w.max() / w.min())

    def term(YT, mean):
        pre = (-YT[:, :n] + lam * alpha) @ G1inv.T
        return np.hstack([project_rows(K, pre, coeffs.G1), np.zeros((YT.shape[0], n))])

    return base.with_terminal(term, lip, label="leader-projected")


def _certificates(coeffs, grid):
    sre1 = solve_sre1(coeffs, grid=grid)
    fc = follower_convexity_certificate(sre1, coeffs.H2)
    sre2 = solve_sre2(coeffs, grid=grid)
    lc = leader_convexity_certificate(sre2, coeffs.H1)
    if not fc.ok:
        raise NotConvex("follower cost is not certified convex", margin=fc.margin)
    if not lc.ok:
        raise NotConvex("leader cost is not certified convex", margin=lc.margin)
    if np.linalg.eigvalsh(coeffs.G1).min() <= 0:
        raise InvalidArgument("G1 must be positive definite")
    info = {"follower_margin": fc.margin, "leader_margin": lc.margin,
            "sre1_residual": sre1.residual_sup, "sre2_residual": sre2.residual_sup}
    return info, fc.margin > 0 and lc.margin > 0


def _selectors(n):
    I, Z = np.eye(n), np.zeros((n, n))
    return np.hstack([I, Z]), np.hstack([Z, I])


def exact_costs(coeffs: GameCoefficients, grid: TimeGrid, lin: LinearSolution):
    """(J1, J2, E ξ) of the leader system's linear solution from exact moments."""
    n, K = coeffs.n, grid.N + 1
    top, bot = _selectors(n)
    snaps = [coeffs.snapshot(t) for t in grid.nodes]
    PX = np.einsum("ij,kjl->kil", top, lin.P)
    pX = lin.p @ top.T
    ZX = np.einsum("ij,kjl->kil", top, lin.ZY)
    zX = lin.z0 @ top.T
    L1 = np.stack([s.R11inv @ s.B1.T @ top for s in snaps])
    L2 = np.stack([s.R22inv @ s.B2.T @ bot for s in snaps])

    def stack(name):
        return np.stack([getattr(s, name) for s in snaps])

    run1 = (lin.expect_quadratic(PX, pX, stack("Q1")) + lin.expect_quadratic(ZX, zX, stack("S1"))
            + lin.expect_quadratic(L1, np.zeros((K, coeffs.m1)), stack("R11")))
    run2 = (lin.expect_quadratic(PX, pX, stack("Q2")) + lin.expect_quadratic(ZX, zX, stack("S2"))
            + lin.expect_quadratic(L2, np.zeros((K, coeffs.m2)), stack("R22")))
    x0 = top @ lin.X0
    term = lin.expect_quadratic(PX[-1:], pX[-1:], coeffs.G1[None], slice(-1, None))[0]
    J1 = 0.5 * (float(time_integral(run1, grid)) + term + float(x0 @ coeffs.H1 @ x0))
    J2 = 0.5 * (float(time_integral(run2, grid)) + float(x0 @ coeffs.H2 @ x0))
    mean_xi = PX[-1] @ lin.mean_Y[-1] + pX[-1]
    return J1, J2, mean_xi


def _controls(coeffs, grid, g, Ybar):
    snaps = [coeffs.snapshot(t) for t in grid.nodes]
    L1 = np.stack([s.R11inv @ s.B1.T for s in snaps])
    L2 = np.stack([s.R22inv @ s.B2.T for s in snaps])
    return np.einsum("kij,mkj->mki", L1, g), np.einsum("kij,mkj->mki", L2, Ybar)


def _from_linear(coeffs, grid, lin, lam, branch, ensemble, spec, **kw) -> EquilibriumSolution:
    n = coeffs.n
    J1, J2, mean_xi = exact_costs(coeffs, grid, lin)
    random = not lin.system.is_diffusion_free(grid)
    if ensemble is not None and random:
        Y, X, Z = lin.simulate(ensemble)
        means = False
    else:
        Y, X, Z = lin.mean_Y[None], lin.mean_X[None], lin.mean_Z[None]
        means = random
    if random and not means:
        xi = TerminalControl.sampled(X[:, -1, :n], ensemble)
    else:
        xi = TerminalControl.deterministic(mean_xi)
    return _assemble(coeffs, grid, lam, branch, Y, X, Z, xi, mean_xi, J1, J2, spec, means, **kw)


def _assemble(coeffs, grid, lam, branch, Y, X, Z, xi, mean_xi, J1, J2, spec, means, **kw):
    n = coeffs.n
    u1, u2 = _controls(coeffs, grid, Y[:, :, :n], Y[:, :, n:])
    sol = EquilibriumSolution(
        lam=float(lam), g=VectorPath(grid, Y[:, :, :n]), Ybar=VectorPath(grid, Y[:, :, n:]),
        Xbar=VectorPath(grid, X[:, :, :n]), Zbar=VectorPath(grid, Z[:, :, :n]),
        h=VectorPath(grid, X[:, :, n:]), q=VectorPath(grid, Z[:, :, n:]), xi=xi,
        u1=VectorPath(grid, u1), u2=VectorPath(grid, u2), J1=float(J1), J2=float(J2),
        kkt_report={}, branch=branch, grid=grid, mean_xi=np.asarray(mean_xi, dtype=float),
        paths_are_means=means, **kw)
    report = verify_kkt(sol, spec, coeffs=coeffs)
    object.__setattr__(sol, "kkt_report", report)
    return sol


# ---------------------------------------------------------------------------
# (P2): expectation constraint only


def solve_p2_affine(coeffs: GameCoefficients, spec: ConstraintSpec, grid: Optional[TimeGrid] = None,
                    ensemble: Optional[ScenarioEnsemble] = None, tol: float = 1e-10
                    ) -> EquilibriumSolution:
    """Affine expectation constraint ⟨α, Eξ⟩ ≥ β with ξ otherwise free.

    The zero-multiplier system is homogeneous, so its solution vanishes and
    that branch is valid exactly when β ≤ 0. The positive branch solves the
    system at λ = 1 and rescales: λ = β / ⟨α, Eξ(1)⟩. The 4n-dimensional
    decoupling gives a second value of λ; it is exact only when C ≡ 0.
    """
    grid = grid or coeffs.grid
    if spec.pointwise_enabled and not isinstance(spec.K, FullSpace):
        raise InvalidArgument("solve_p2_affine takes an expectation constraint only")
    if not spec.affine_enabled:
        raise InvalidArgument("affine constraint is disabled")
    info, unique = _certificates(coeffs, grid)
    n = coeffs.n
    alpha, beta = spec.alpha, spec.beta
    G1inv = np.linalg.inv(coeffs.G1)
    w = float(alpha @ G1inv @ alpha)

    tilde = solve_decoupling_tilde(assemble_tilde_blocks(coeffs, grid), grid)
    zero = {"solved": True, "primal_margin": beta, "valid": beta <= tol,
            "riccati_residual": tilde.residual_sup, "kind": tilde.kind}

    lin1 = solve_linear(leader_system(coeffs, 1.0, alpha), grid)
    _, _, mxi1 = exact_costs(coeffs, grid, lin1)
    denom = float(alpha @ mxi1)
    lam_direct = beta / denom if denom > 0 else math.nan
    positive = {"solved": denom > 0, "lambda": lam_direct, "dual_margin": denom * lam_direct
                if denom > 0 else -math.inf, "route": "direct"}
    try:
        chk = solve_decoupling_check(assemble_check_blocks(coeffs, alpha, beta, grid), grid)
        EgT = chk.mean_Y_T[:n]
        kkt4 = beta + float(alpha @ G1inv @ EgT)
        positive.update(lambda_check=kkt4 / w, kkt4_margin=kkt4,
                        check_exact=coeffs.c_is_zero(), check_residual=chk.riccati.residual_sup)
    except (SolverError, np.linalg.LinAlgError) as exc:  # the check decoupling is diagnostic here
        positive.update(lambda_check=None, check_error=str(exc))
    lam_pos = lam_direct
    positive["valid"] = bool(denom > 0 and lam_pos > tol)
    positive["lambda"] = lam_pos

    if zero["valid"] and positive["valid"]:
        log.info("zero and positive multiplier branches coincide at β=%g", beta)
    if zero["valid"]:
        chosen = "Zero"
    elif positive["valid"]:
        chosen = "Positive"
    else:
        raise KKTIndeterminate("neither multiplier branch validates",
                               zero_branch=zero, positive_branch=positive)
    diag = KKTBranchDiagnostics(zero, positive, chosen)
    lam = 0.0 if chosen == "Zero" else lam_pos
    lin = solve_linear(leader_system(coeffs, lam, alpha), grid)
    return _from_linear(coeffs, grid, lin, lam, chosen, ensemble, spec, diagnostics=diag,
                        certificates=info, unique=unique)


# ---------------------------------------------------------------------------
# pointwise constraint: reduction to a quadratic programme when C ≡ 0


@dataclass(frozen=True, eq=False)
class ReducedProblem:
    """J1 minimised over u1 for fixed deterministic ξ is ½ ξᵀ Q ξ."""

    Q: np.ndarray
    L: np.ndarray
    asymmetry: float


def reduced_problem(coeffs: GameCoefficients, grid: TimeGrid) -> ReducedProblem:
    n = coeffs.n
    top, _ = _selectors(n)
    L = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        lin = solve_linear(leader_system(coeffs, terminal=e), grid)
        L[:, i] = top @ lin.mean_Y[-1]
    Q = coeffs.G1 + L
    asym = float(np.max(np.abs(Q - Q.T)))
    return ReducedProblem(0.5 * (Q + Q.T), L, asym)


def _qp_terminal(rp: ReducedProblem, K, lam: float, alpha) -> np.ndarray:
    """argmin over K of ½ ξᵀQξ - λ⟨α, ξ⟩, i.e. the Q-metric projection of λ Q^{-1} α."""
    n = rp.Q.shape[0]
    target = lam * np.linalg.solve(rp.Q, alpha) if lam else np.zeros(n)
    return K.project(target, rp.Q)


def _fixed_terminal_solution(coeffs, grid, xi, lam, branch, spec, alpha, K, **kw):
    lin = solve_linear(leader_system(coeffs, terminal=xi), grid)
    sol = _from_linear(coeffs, grid, lin, lam, branch, None, spec, **kw)
    gT = sol.g.values[0, -1]
    pre = np.linalg.solve(coeffs.G1, -gT + lam * alpha)
    resid = float(np.max(np.abs(K.project(pre, coeffs.G1) - xi)))
    sol.extras["terminal_formula_residual"] = resid
    return sol


def _pointwise_solve(coeffs, grid, K, lam, alpha, ensemble, method, picard_options, override,
                     rp=None):
    """Inner solve at fixed λ; returns (mean ξ, solution factory)."""
    if method == "reduction":
        rp = rp or reduced_problem(coeffs, grid)
        xi = _qp_terminal(rp, K, lam, alpha)
        return xi, rp
    system = leader_system(coeffs, lam, alpha, K)
    cert = certify(system, "general", grid=grid)
    if not cert.passed and not override:
        raise Refused("wellposedness certificate fails; pass override to run anyway",
                      contraction_factor=cert.contraction_factor)
    opts = dict(picard_options or {})
    opts.setdefault("rho", cert.rho if np.isfinite(cert.rho) else 0.0)
    res = picard_solve(system, grid, ensemble, **opts)
    return res.X[:, -1, :coeffs.n].mean(axis=0), (res, cert)


def _resolve_method(coeffs, method, ensemble):
    if method == "auto":
        return "reduction" if coeffs.c_is_zero() else "picard"
    if method == "reduction" and not coeffs.c_is_zero():
        raise InvalidArgument("the quadratic-programme reduction needs C ≡ 0")
    if method not in ("reduction", "picard"):
        raise InvalidArgument(f"unknown method {method!r}")
    if method == "picard" and ensemble is None and not coeffs.c_is_zero():
        raise InvalidArgument("C ≠ 0 requires a scenario ensemble")
    return method


def _picard_solution(coeffs, grid, res, cert, lam, branch, spec, alpha, K, ensemble, **kw):
    n = coeffs.n
    Y, X = res.Y, res.X
    Z = np.concatenate([res.Z, res.Z[:, -1:]], axis=1)
    xiT = X[:, -1, :n]
    if res.mode == "ode":
        xi = TerminalControl.deterministic(xiT[0])
    else:
        xi = TerminalControl.sampled(xiT, ensemble)
    u1, u2 = _controls(coeffs, grid, Y[:, :, :n], Y[:, :, n:])
    J1, J2 = _mc_costs(coeffs, grid, X[:, :, :n], Z[:, :, :n], u1, u2, xiT)
    kw.setdefault("extras", {}).update(picard=res.trace.to_dict(), certificate=cert.to_dict(),
                                       x0_stderr=res.x0_stderr.tolist())
    return _assemble(coeffs, grid, lam, branch, Y, X, Z, xi, xiT.mean(axis=0), J1, J2, spec,
                     False, **kw)


def _mc_costs(coeffs, grid, X, Z, u1, u2, xiT):
    snaps = [coeffs.snapshot(t) for t in grid.nodes]

    def q(P, name):
        W = np.stack([getattr(s, name) for s in snaps])
        return np.einsum("mki,kij,mkj->mk", P, W, P)

    x0 = X[:, 0]
    run1 = q(X, "Q1") + q(Z, "S1") + q(u1, "R11")
    run2 = q(X, "Q2") + q(Z, "S2") + q(u2, "R22")
    J1 = 0.5 * (time_integral(run1.T, grid) + np.einsum("mi,ij,mj->m", xiT, coeffs.G1, xiT)
                + np.einsum("mi,ij,mj->m", x0, coeffs.H1, x0))
    J2 = 0.5 * (time_integral(run2.T, grid) + np.einsum("mi,ij,mj->m", x0, coeffs.H2, x0))
    return float(J1.mean()), float(J2.mean())


def solve_p1_pointwise(coeffs: GameCoefficients, spec: ConstraintSpec,
                       grid: Optional[TimeGrid] = None, ensemble: Optional[ScenarioEnsemble] = None,
                       picard_options: Optional[dict] = None, override_certificate: bool = False,
                       method: str = "auto") -> EquilibriumSolution:
    """ξ ∈ K almost surely, no expectation constraint.

    With C ≡ 0 the optimal ξ is deterministic and minimises the reduced
    quadratic form over K ("reduction"). Otherwise, or on request, the
    projected system is solved by Picard iteration.
    """
    grid = grid or coeffs.grid
    K = spec.effective_set
    info, unique = _certificates(coeffs, grid)
    method = _resolve_method(coeffs, method, ensemble)
    n = coeffs.n
    alpha = np.zeros(n)
    pspec = ConstraintSpec(K, None, 0.0, True, False)
    xi, aux = _pointwise_solve(coeffs, grid, K, 0.0, alpha, ensemble, method, picard_options,
                               override_certificate)
    if method == "reduction":
        return _fixed_terminal_solution(coeffs, grid, xi, 0.0, "PointwiseOnly", pspec, alpha, K,
                                        certificates=info, unique=unique,
                                        notes=["reduced quadratic programme"])
    res, cert = aux
    return _picard_solution(coeffs, grid, res, cert, 0.0, "PointwiseOnly", pspec, alpha, K,
                            ensemble, certificates=info, unique=unique)


# ---------------------------------------------------------------------------
# (P): both constraints


def solve_p_general(coeffs: GameCoefficients, spec: ConstraintSpec, grid: Optional[TimeGrid] = None,
                    ensemble: Optional[ScenarioEnsemble] = None, picard_options: Optional[dict] = None,
                    override_certificate: bool = False, method: str = "auto",
                    tol: float = 1e-12) -> EquilibriumSolution:
    """Outer root search on φ(λ) = β - ⟨α, E ξ_λ⟩ with the pointwise solve inside."""
    grid = grid or coeffs.grid
    if not spec.affine_enabled:
        return solve_p1_pointwise(coeffs, spec, grid, ensemble, picard_options,
                                  override_certificate, method)
    K = spec.effective_set
    verdict = classify_feasibility(spec)
    if verdict.outcome == Feasibility.EMPTY:
        raise InvalidArgument("the constraint set is empty", feasibility=verdict.to_dict())
    if verdict.cls == Feasibility.EXPOSED_FACE:
        raise Refused("β equals the support value; no multiplier is guaranteed",
                      feasibility=verdict.to_dict())
    info, unique = _certificates(coeffs, grid)
    method = _resolve_method(coeffs, method, ensemble)
    alpha, beta = spec.alpha, spec.beta
    rp = reduced_problem(coeffs, grid) if method == "reduction" else None
    cache = {}

    def inner(lam):
        if lam not in cache:
            cache[lam] = _pointwise_solve(coeffs, grid, K, lam, alpha, ensemble, method,
                                          picard_options, override_certificate, rp)
        return cache[lam]

    def phi(lam):
        return beta - float(alpha @ inner(lam)[0])

    scale = tol * (1.0 + abs(beta))
    notes = [f"feasibility: {verdict.cls.value}"]
    sign_changes = []
    if phi(0.0) <= scale:
        lam = 0.0
        branch = "PointwiseOnly" if verdict.outcome == Feasibility.POINTWISE_ONLY else "General"
    else:
        G1inv = np.linalg.inv(coeffs.G1)
        top, _ = _selectors(coeffs.n)
        EgT = _mean_gT(inner(0.0), coeffs, grid, method)
        lo, hi = 0.0, (abs(beta) + np.linalg.norm(alpha) * np.linalg.norm(G1inv) * np.linalg.norm(EgT)
                       + 1.0) / float(alpha @ G1inv @ alpha)
        while phi(hi) > scale:
            lo, hi = hi, 2 * hi
            if hi > LAMBDA_CAP:
                raise KKTBracketFailure("no sign change of φ below the bracket cap",
                                        cap=LAMBDA_CAP, phi_at_cap=phi(lo))
        probe = np.linspace(0.0, hi, 17)
        vals = [phi(x) for x in probe]
        sign_changes = [float(probe[i]) for i in range(16) if vals[i] > 0 >= vals[i + 1]]
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if phi(mid) > 0:
                lo = mid
            else:
                hi = mid
            if hi - lo <= 1e-14 * max(1.0, hi):
                break
        lam = hi
        branch = "General"
        if len(sign_changes) > 1:
            notes.append(f"φ changes sign {len(sign_changes)} times on the probe grid")
    xi_mean, aux = inner(lam)
    extras = {"sign_changes": sign_changes, "phi_at_lambda": phi(lam),
              "feasibility": verdict.to_dict()}
    if method == "reduction":
        sol = _fixed_terminal_solution(coeffs, grid, xi_mean, lam, branch, spec, alpha, K,
                                       certificates=info, unique=unique, notes=notes)
        sol.extras.update(extras)
        return sol
    res, cert = aux
    return _picard_solution(coeffs, grid, res, cert, lam, branch, spec, alpha, K, ensemble,
                            certificates=info, unique=unique, notes=notes, extras=extras)


def _mean_gT(inner_result, coeffs, grid, method):
    n = coeffs.n
    xi, aux = inner_result
    if method == "reduction":
        return aux.L @ xi
    res, _ = aux
    return res.Y[:, -1, :n].mean(axis=0)


# ---------------------------------------------------------------------------
# KKT verification


def verify_kkt(solution: EquilibriumSolution, spec: ConstraintSpec, tolerance: float = 1e-8,
               coeffs: Optional[GameCoefficients] = None) -> dict:
    """Slackness, primal margin, dual sign and the saddle inequality sampled at
    λ' ∈ {0, λ/2, 2λ}; with coefficients also the terminal formula."""
    lam = float(solution.lam)
    if spec.affine_enabled:
        margin = float(spec.beta - spec.alpha @ solution.mean_xi)
    else:
        margin = -math.inf
    slack = lam * margin if spec.affine_enabled else 0.0
    L = solution.J1 + (lam * margin if spec.affine_enabled else 0.0)
    saddle = []
    for lp in (0.0, lam / 2, 2 * lam):
        Lp = solution.J1 + (lp * margin if spec.affine_enabled else 0.0)
        saddle.append(Lp - L)
    report = {
        "slackness": slack, "primal_margin": margin if np.isfinite(margin) else None,
        "dual_ok": lam >= 0, "saddle_gaps": saddle,
        "slackness_ok": abs(slack) <= tolerance,
        "primal_ok": (not spec.affine_enabled) or margin <= max(tolerance, 1e-6),
        "saddle_ok": all(s <= max(tolerance, 1e-6) * (1 + abs(solution.J1)) for s in saddle),
    }
    if coeffs is not None and not solution.paths_are_means:
        K = spec.effective_set
        gT = solution.g.values[:, -1]
        alpha = spec.alpha if spec.affine_enabled else np.zeros(coeffs.n)
        pre = np.linalg.solve(coeffs.G1, (-gT + lam * alpha).T).T
        xiT = solution.Xbar.values[:, -1]
        report["terminal_residual"] = float(np.max(np.abs(project_rows(K, pre, coeffs.G1) - xiT)))
        report["terminal_ok"] = report["terminal_residual"] <= 1e-6 * (1 + float(np.max(np.abs(xiT))))
    report["ok"] = bool(report["dual_ok"] and report["slackness_ok"] and report["primal_ok"]
                        and report["saddle_ok"] and report.get("terminal_ok", True))
    return report
