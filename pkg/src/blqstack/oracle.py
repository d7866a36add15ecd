"""Discrete-time bilevel QP oracle for deterministic-data instances.

The state recursion is backward Euler with Z ≡ 0 and costs are left-point
sums, so every quantity is an exact quadratic form in (ξ, u1, u2). The
follower's response is a linear solve; the leader's problem is a QP over
(ξ, u1) solved by enumerating active sets of the constraints on ξ.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .constraints import Box, ConstraintSpec, FullSpace, Halfspace, Point
from .core import TimeGrid, build_grid
from .errors import InstanceTooLarge, InvalidArgument, NotConvex

MAX_STEPS = 128
MAX_PATTERNS = 4096


@dataclass(frozen=True, eq=False)
class DiscreteGame:
    grid: TimeGrid
    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    Q1: np.ndarray
    Q2: np.ndarray
    R11: np.ndarray
    R22: np.ndarray
    G1: np.ndarray
    H1: np.ndarray
    H2: np.ndarray
    spec: Optional[ConstraintSpec] = None

    def __post_init__(self):
        if self.grid.N > MAX_STEPS:
            raise InstanceTooLarge(f"oracle grids are limited to {MAX_STEPS} steps",
                                   N=self.grid.N)
        dt = self.grid.dt
        for k in range(self.grid.N):
            if abs(np.linalg.det(np.eye(self.n) + dt * self.A[k])) < 1e-12:
                raise InvalidArgument("I + dt A_k is singular", node=k)

    @classmethod
    def from_coefficients(cls, coeffs, N: int, spec: Optional[ConstraintSpec] = None
                          ) -> "DiscreteGame":
        """Sample continuous-time coefficients at the nodes of an N-step grid."""
        if not coeffs.c_is_zero():
            raise InvalidArgument("the oracle covers the deterministic subclass C ≡ 0")
        grid = build_grid(coeffs.grid.T, N)
        snaps = [coeffs.snapshot(t) for t in grid.nodes]

        def stack(name):
            return np.stack([getattr(s, name) for s in snaps])

        return cls(grid, stack("A"), stack("B1"), stack("B2"), stack("Q1"), stack("Q2"),
                   stack("R11"), stack("R22"), np.array(coeffs.G1), np.array(coeffs.H1),
                   np.array(coeffs.H2), spec)

    @property
    def n(self) -> int:
        return self.A.shape[1]

    @property
    def m1(self) -> int:
        return self.B1.shape[2]

    @property
    def m2(self) -> int:
        return self.B2.shape[2]

    @property
    def sizes(self):
        N = self.grid.N
        return self.n, N * self.m1, N * self.m2

    def state_maps(self) -> np.ndarray:
        """T[k] with X_k = T[k] @ (ξ, u1, u2), controls stacked node by node."""
        n, s1, s2 = self.sizes
        N, dt = self.grid.N, self.grid.dt
        T = np.zeros((N + 1, n, n + s1 + s2))
        T[N, :, :n] = np.eye(n)
        for k in range(N - 1, -1, -1):
            rhs = T[k + 1].copy()
            i1 = n + k * self.m1
            i2 = n + s1 + k * self.m2
            rhs[:, i1:i1 + self.m1] -= dt * self.B1[k]
            rhs[:, i2:i2 + self.m2] -= dt * self.B2[k]
            T[k] = np.linalg.solve(np.eye(n) + dt * self.A[k], rhs)
        return T

    def cost_matrices(self):
        """Hessians W1, W2 with J_i = ½ vᵀ W_i v over v = (ξ, u1, u2)."""
        n, s1, s2 = self.sizes
        N, dt = self.grid.N, self.grid.dt
        T = self.state_maps()
        W1 = dt * np.einsum("kia,kij,kjb->ab", T[:N], self.Q1[:N], T[:N])
        W2 = dt * np.einsum("kia,kij,kjb->ab", T[:N], self.Q2[:N], T[:N])
        W1 += T[0].T @ self.H1 @ T[0]
        W2 += T[0].T @ self.H2 @ T[0]
        W1[:n, :n] += self.G1
        for k in range(N):
            i1 = n + k * self.m1
            i2 = n + s1 + k * self.m2
            W1[i1:i1 + self.m1, i1:i1 + self.m1] += dt * self.R11[k]
            W2[i2:i2 + self.m2, i2:i2 + self.m2] += dt * self.R22[k]
        return 0.5 * (W1 + W1.T), 0.5 * (W2 + W2.T), T


@dataclass(frozen=True, eq=False)
class OracleSolution:
    xi: np.ndarray
    u1: np.ndarray
    u2: np.ndarray
    X: np.ndarray
    J1: float
    J2: float
    multipliers: Dict[str, np.ndarray]
    kkt_residual: float
    active: tuple
    grid: TimeGrid

    @property
    def lam(self) -> float:
        return float(self.multipliers.get("affine", np.zeros(1))[0])

    def to_dict(self):
        return {"xi": self.xi.tolist(), "J1": self.J1, "J2": self.J2, "lambda": self.lam,
                "kkt_residual": self.kkt_residual, "active": list(self.active),
                "N": self.grid.N}


def _follower_response(dg: DiscreteGame, W2: np.ndarray):
    """u2 = F p for p = (ξ, u1)."""
    n, s1, s2 = dg.sizes
    p = n + s1
    Huu = W2[p:, p:]
    if s2 and np.linalg.eigvalsh(Huu).min() <= 1e-12 * max(1.0, np.abs(Huu).max()):
        raise NotConvex("follower's discrete Hessian is not positive definite")
    if not s2:
        return np.zeros((0, p))
    return -np.linalg.solve(Huu, W2[p:, :p])


def oracle_follower(dg: DiscreteGame, xi, u1=None):
    """Follower best response u2 (shape (N, m2)) and its cost."""
    n, s1, s2 = dg.sizes
    W1, W2, _ = dg.cost_matrices()
    xi = np.asarray(xi, dtype=float).reshape(n)
    u1 = np.zeros(s1) if u1 is None else np.asarray(u1, dtype=float).reshape(s1)
    F = _follower_response(dg, W2)
    p = np.concatenate([xi, u1])
    u2 = F @ p
    v = np.concatenate([p, u2])
    return u2.reshape(dg.grid.N, dg.m2), float(0.5 * v @ W2 @ v)


def _constraint_rows(spec: Optional[ConstraintSpec], n: int):
    """Rows (a, b, name) for ⟨a, ξ⟩ ≤ b, grouped for enumeration, plus equality rows."""
    groups: List[List[tuple]] = []
    equalities: List[tuple] = []
    if spec is None:
        return groups, equalities
    K = spec.effective_set
    if isinstance(K, Box):
        for i in range(n):
            opts = []
            e = np.zeros(n)
            e[i] = 1.0
            if np.isfinite(K.lower[i]):
                opts.append((-e, -K.lower[i], f"lower[{i}]"))
            if np.isfinite(K.upper[i]):
                opts.append((e, K.upper[i], f"upper[{i}]"))
            if opts:
                groups.append(opts)
    elif isinstance(K, Halfspace):
        groups.append([(K.normal, K.offset, "halfspace")])
    elif isinstance(K, Point):
        for i in range(n):
            e = np.zeros(n)
            e[i] = 1.0
            equalities.append((e, K.c[i], f"point[{i}]"))
    elif not isinstance(K, FullSpace):
        raise InvalidArgument(f"oracle does not support {type(K).__name__}")
    if spec.affine_enabled:
        groups.append([(-spec.alpha, -spec.beta, "affine")])
    return groups, equalities


def oracle_leader(dg: DiscreteGame, tol: float = 1e-10) -> OracleSolution:
    n, s1, s2 = dg.sizes
    W1, W2, T = dg.cost_matrices()
    F = _follower_response(dg, W2)
    p_dim = n + s1
    S = np.vstack([np.eye(p_dim), F])
    H = S.T @ W1 @ S
    H = 0.5 * (H + H.T)
    if np.linalg.eigvalsh(H).min() < -1e-10 * max(1.0, np.abs(H).max()):
        raise NotConvex("leader's reduced Hessian is indefinite")
    groups, eqs = _constraint_rows(dg.spec, n)
    n_patterns = math.prod(len(g) + 1 for g in groups)
    if n_patterns > MAX_PATTERNS:
        raise InstanceTooLarge("active-set enumeration exceeds the cap", patterns=n_patterns)
    all_rows = [r for g in groups for r in g]
    best = None
    for pattern in itertools.product(*[range(len(g) + 1) for g in groups]):
        active = [g[c - 1] for g, c in zip(groups, pattern) if c] + eqs
        sol = _equality_qp(H, active, p_dim, n)
        if sol is None:
            continue
        v, mu = sol
        xi = v[:n]
        if any(a @ xi > b + 1e-9 * (1 + abs(b)) for a, b, _ in all_rows):
            continue
        n_ineq = len(active) - len(eqs)
        if np.any(mu[:n_ineq] < -1e-9):
            continue
        val = 0.5 * v @ H @ v
        if best is None or val < best[0] - 1e-14:
            best = (val, v, mu, active)
    if best is None:
        raise InvalidArgument("discrete leader problem is infeasible")
    _, v, mu, active = best
    grad = H @ v
    if active:
        E = np.array([np.concatenate([a, np.zeros(p_dim - n)]) for a, _, _ in active])
        grad = grad + E.T @ mu
    resid = float(np.max(np.abs(grad))) if grad.size else 0.0
    u2 = F @ v
    full = np.concatenate([v, u2])
    X = T @ full
    mult = {name: np.array([m]) for (_, _, name), m in zip(active, mu)}
    N = dg.grid.N
    return OracleSolution(v[:n].copy(), v[n:].reshape(N, dg.m1), u2.reshape(N, dg.m2), X,
                          float(0.5 * full @ W1 @ full), float(0.5 * full @ W2 @ full), mult,
                          resid, tuple(name for _, _, name in active), dg.grid)


def _equality_qp(H, active, p_dim, n):
    k = len(active)
    if k == 0:
        return np.zeros(p_dim), np.zeros(0)
    E = np.array([np.concatenate([a, np.zeros(p_dim - n)]) for a, _, _ in active])
    d = np.array([b for _, b, _ in active])
    K = np.block([[H, E.T], [E, np.zeros((k, k))]])
    rhs = np.concatenate([np.zeros(p_dim), d])
    try:
        sol = np.linalg.solve(K, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)) or np.linalg.cond(K) > 1e12:
        return None
    return sol[:p_dim], sol[p_dim:]


# ---------------------------------------------------------------------------
# comparison with the continuous solvers


@dataclass(frozen=True)
class ComparisonReport:
    N: int
    J1_gap: float
    J2_gap: float
    J1_rel: float
    J2_rel: float
    u1_sup_gap: float
    u2_sup_gap: float
    xi_gap: float
    multiplier_gap: float

    def to_dict(self):
        return dict(self.__dict__)


def _relative(a, b, floor=1e-12):
    return abs(a - b) / max(abs(a), abs(b), floor)


def compare(continuous, discrete: OracleSolution) -> ComparisonReport:
    """Gaps between an equilibrium on a fine grid and an oracle solution."""
    g = discrete.grid
    nodes = g.nodes[:-1]
    cg = continuous.grid.nodes

    def interp(path):
        vals = path.values[0]
        return np.stack([np.interp(nodes, cg, vals[:, j]) for j in range(vals.shape[1])], axis=1)

    u1 = interp(continuous.u1)
    u2 = interp(continuous.u2)
    return ComparisonReport(
        N=g.N,
        J1_gap=abs(continuous.J1 - discrete.J1), J2_gap=abs(continuous.J2 - discrete.J2),
        J1_rel=_relative(continuous.J1, discrete.J1), J2_rel=_relative(continuous.J2, discrete.J2),
        u1_sup_gap=float(np.max(np.abs(u1 - discrete.u1))) if u1.size else 0.0,
        u2_sup_gap=float(np.max(np.abs(u2 - discrete.u2))) if u2.size else 0.0,
        xi_gap=float(np.max(np.abs(continuous.mean_xi - discrete.xi))),
        multiplier_gap=abs(continuous.lam - discrete.lam),
    )


@dataclass(frozen=True, eq=False)
class ConvergenceTable:
    rows: List[ComparisonReport]
    slope: float
    metric: str
    fitted: bool = True
    notes: List[str] = field(default_factory=list)

    def to_dict(self):
        return {"rows": [r.to_dict() for r in self.rows], "slope": self.slope,
                "metric": self.metric, "fitted": self.fitted, "notes": list(self.notes)}


def convergence_table(continuous, coeffs, spec: Optional[ConstraintSpec],
                      Ns: Sequence[int] = (16, 32, 64, 128), metric: str = "J1_gap",
                      floor: float = 1e-13) -> ConvergenceTable:
    """Oracle solutions over ``Ns`` against one continuous reference and the
    least-squares slope of log(gap) against log(dt)."""
    rows = [compare(continuous, oracle_leader(DiscreteGame.from_coefficients(coeffs, N, spec)))
            for N in Ns]
    gaps = np.array([getattr(r, metric) for r in rows])
    dts = np.array([coeffs.grid.T / N for N in Ns])
    notes = []
    if np.all(gaps <= floor):
        notes.append("all gaps below the floor; slope not fitted")
        return ConvergenceTable(rows, math.nan, metric, False, notes)
    slope = float(np.polyfit(np.log(dts), np.log(np.maximum(gaps, floor)), 1)[0])
    return ConvergenceTable(rows, slope, metric, True, notes)
