"""The follower's problem: best response to a committed (ξ, u1)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Dict, Optional

import numpy as np
from scipy.interpolate import CubicSpline

from .bfsde import BfsdeSystem, LinearSolution, picard_solve, polynomial_features, Projector, solve_linear
from .core import MatrixPath, ScenarioEnsemble, TimeGrid, VectorPath, integrate_ode, time_integral
from .errors import InvalidArgument, NotConvex
from .riccati import Certificate, RiccatiSolution, follower_convexity_certificate, solve_sre1

_SYM_TOL = 1e-12


@dataclass(frozen=True)
class Snapshot:
    """All coefficients frozen at one time, with the derived products."""

    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C: np.ndarray
    Q1: np.ndarray
    Q2: np.ndarray
    S1: np.ndarray
    S2: np.ndarray
    R11: np.ndarray
    R22: np.ndarray
    G1: np.ndarray
    H1: np.ndarray
    H2: np.ndarray

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m1(self) -> int:
        return self.B1.shape[1]

    @property
    def m2(self) -> int:
        return self.B2.shape[1]

    @cached_property
    def R11inv(self) -> np.ndarray:
        return np.linalg.inv(self.R11)

    @cached_property
    def R22inv(self) -> np.ndarray:
        return np.linalg.inv(self.R22)

    @cached_property
    def N1(self) -> np.ndarray:
        return self.B1 @ self.R11inv @ self.B1.T

    @cached_property
    def N2(self) -> np.ndarray:
        return self.B2 @ self.R22inv @ self.B2.T


_PATHS = ("A", "B1", "B2", "C", "Q1", "Q2", "S1", "S2", "R11", "R22")
_SYMMETRIC = ("Q1", "Q2", "S1", "S2", "R11", "R22")


@dataclass(frozen=True, eq=False)
class GameCoefficients:
    grid: TimeGrid
    A: MatrixPath
    B1: MatrixPath
    B2: MatrixPath
    C: MatrixPath
    Q1: MatrixPath
    Q2: MatrixPath
    S1: MatrixPath
    S2: MatrixPath
    R11: MatrixPath
    R22: MatrixPath
    G1: np.ndarray
    H1: np.ndarray
    H2: np.ndarray
    _snaps: Dict[float, Snapshot] = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        n, m1, m2 = self.n, self.m1, self.m2
        expected = {"A": (n, n), "B1": (n, m1), "B2": (n, m2), "C": (n, n), "Q1": (n, n),
                    "Q2": (n, n), "S1": (n, n), "S2": (n, n), "R11": (m1, m1), "R22": (m2, m2)}
        for name, shape in expected.items():
            path = getattr(self, name)
            if path.grid != self.grid:
                raise InvalidArgument(f"{name} lives on a different grid")
            if path.shape != shape:
                raise InvalidArgument(f"{name} must be {shape}, got {path.shape}")
        for name in _SYMMETRIC:
            v = getattr(self, name).values
            if np.max(np.abs(v - np.swapaxes(v, 1, 2))) > _SYM_TOL:
                raise InvalidArgument(f"{name} must be symmetric")
        for name in ("G1", "H1", "H2"):
            M = np.atleast_2d(np.asarray(getattr(self, name), dtype=float))
            if M.shape != (n, n) or np.max(np.abs(M - M.T)) > _SYM_TOL:
                raise InvalidArgument(f"{name} must be a symmetric {n}x{n} matrix")
            object.__setattr__(self, name, 0.5 * (M + M.T))
        for name in ("R11", "R22"):
            v = getattr(self, name).values
            if np.min(np.abs(np.linalg.det(v))) < 1e-12:
                raise InvalidArgument(f"{name} must be invertible at every node")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m1(self) -> int:
        return self.B1.shape[1]

    @property
    def m2(self) -> int:
        return self.B2.shape[1]

    @classmethod
    def constant(cls, grid: TimeGrid, n: int = 1, m1: Optional[int] = None,
                 m2: Optional[int] = None, **values) -> "GameCoefficients":
        """Time-invariant coefficients; scalars are broadcast to the identity
        pattern (``A=2`` means ``2 I``). Unset weights default to zero except
        R11 = R22 = G1 = I."""
        m1 = n if m1 is None else m1
        m2 = n if m2 is None else m2
        shapes = {"A": (n, n), "B1": (n, m1), "B2": (n, m2), "C": (n, n), "Q1": (n, n),
                  "Q2": (n, n), "S1": (n, n), "S2": (n, n), "R11": (m1, m1), "R22": (m2, m2),
                  "G1": (n, n), "H1": (n, n), "H2": (n, n)}
        unknown = set(values) - set(shapes)
        if unknown:
            raise InvalidArgument(f"unknown coefficient(s): {sorted(unknown)}")
        defaults = {"R11": 1.0, "R22": 1.0, "G1": 1.0}
        mats = {}
        for name, shape in shapes.items():
            v = values.get(name, defaults.get(name, 0.0))
            mats[name] = _as_matrix(v, shape, name)
        paths = {k: MatrixPath.constant(grid, mats[k]) for k in _PATHS}
        return cls(grid, G1=mats["G1"], H1=mats["H1"], H2=mats["H2"], **paths)

    @classmethod
    def from_functions(cls, grid: TimeGrid, G1, H1, H2, **fns) -> "GameCoefficients":
        """Coefficients given as callables of time (or constants)."""
        paths = {}
        for name in _PATHS:
            f = fns[name]
            paths[name] = (MatrixPath.from_function(grid, f) if callable(f)
                           else MatrixPath.constant(grid, f))
        return cls(grid, G1=np.atleast_2d(G1), H1=np.atleast_2d(H1), H2=np.atleast_2d(H2), **paths)

    def snapshot(self, t: float) -> Snapshot:
        key = float(t)
        snap = self._snaps.get(key)
        if snap is None:
            snap = Snapshot(*(getattr(self, k).at(key) for k in _PATHS),
                            G1=self.G1, H1=self.H1, H2=self.H2)
            self._snaps[key] = snap
        return snap

    def regrid(self, grid: TimeGrid) -> "GameCoefficients":
        paths = {}
        for name in _PATHS:
            path = getattr(self, name)
            if path.fn is None:
                raise InvalidArgument(f"{name} is nodal data and cannot be moved to another grid")
            paths[name] = MatrixPath.from_function(grid, path.fn)
        return GameCoefficients(grid, G1=self.G1, H1=self.H1, H2=self.H2, **paths)

    def c_is_zero(self, tol: float = 1e-14) -> bool:
        return self.C.sup_norm() < tol

    def to_dict(self):
        out = {k: getattr(self, k).values.tolist() if not getattr(self, k).is_constant()
               else getattr(self, k).values[0].tolist() for k in _PATHS}
        out.update(G1=self.G1.tolist(), H1=self.H1.tolist(), H2=self.H2.tolist(),
                   T=self.grid.T, N=self.grid.N)
        return out


def _as_matrix(v, shape, name) -> np.ndarray:
    M = np.asarray(v, dtype=float)
    if M.ndim == 0:
        if shape[0] != shape[1] and float(M) != 0.0 and min(shape) != 1:
            raise InvalidArgument(f"{name}: scalar needs a square or vector shape")
        return float(M) * np.eye(*shape)
    M = np.atleast_2d(M)
    if M.shape != shape:
        if M.size == shape[0] * shape[1]:
            return M.reshape(shape)
        raise InvalidArgument(f"{name} must be {shape}, got {M.shape}")
    return M


# ---------------------------------------------------------------------------
# terminal controls


@dataclass(frozen=True, eq=False)
class TerminalControl:
    """ξ as a deterministic vector, as ξ0 + ξ1 W(T), or as per-scenario samples."""

    kind: str
    xi0: np.ndarray
    xi1: Optional[np.ndarray] = None
    samples: Optional[np.ndarray] = None
    ensemble: Optional[ScenarioEnsemble] = None

    @classmethod
    def deterministic(cls, c) -> "TerminalControl":
        return cls("deterministic", np.atleast_1d(np.asarray(c, dtype=float)).ravel())

    @classmethod
    def linear_in_w(cls, xi0, xi1) -> "TerminalControl":
        xi0 = np.atleast_1d(np.asarray(xi0, dtype=float)).ravel()
        xi1 = np.atleast_1d(np.asarray(xi1, dtype=float)).ravel()
        if xi0.shape != xi1.shape:
            raise InvalidArgument("xi0 and xi1 must have equal length")
        return cls("linear_in_w", xi0, xi1)

    @classmethod
    def sampled(cls, samples, ensemble: ScenarioEnsemble) -> "TerminalControl":
        s = np.asarray(samples, dtype=float)
        if s.ndim == 1:
            s = s[:, None]
        if s.shape[0] != ensemble.n_paths:
            raise InvalidArgument("one sample per scenario is required")
        return cls("sampled", s.mean(axis=0), samples=s, ensemble=ensemble)

    @property
    def n(self) -> int:
        return self.xi0.size

    @property
    def seed(self) -> Optional[int]:
        return None if self.ensemble is None else self.ensemble.seed

    @property
    def mean(self) -> np.ndarray:
        return self.xi0.copy()

    @property
    def is_random(self) -> bool:
        return self.kind != "deterministic" and not (self.kind == "linear_in_w" and not np.any(self.xi1))

    def values(self, ensemble: Optional[ScenarioEnsemble] = None) -> np.ndarray:
        """Scenario values, shape (M, n)."""
        if self.kind == "deterministic":
            M = 1 if ensemble is None else ensemble.n_paths
            return np.broadcast_to(self.xi0, (M, self.n)).copy()
        if self.kind == "linear_in_w":
            if ensemble is None:
                raise InvalidArgument("a scenario ensemble is needed to realise a random ξ")
            return self.xi0 + np.outer(ensemble.W[:, -1], self.xi1)
        if ensemble is not None and ensemble is not self.ensemble:
            raise InvalidArgument("sampled ξ belongs to a different ensemble")
        return self.samples.copy()

    def to_dict(self):
        out = {"kind": self.kind, "mean": self.xi0.tolist()}
        if self.xi1 is not None:
            out["xi1"] = self.xi1.tolist()
        if self.samples is not None:
            out["std"] = self.samples.std(axis=0, ddof=1).tolist() if len(self.samples) > 1 else [0.0] * self.n
            out["seed"] = self.seed
        return out


# ---------------------------------------------------------------------------
# follower solution


@dataclass(frozen=True, eq=False)
class FollowerSolution:
    u2: VectorPath
    X: VectorPath
    Z: VectorPath
    Y: VectorPath
    J2: float
    stationarity_residual: float
    sre1: RiccatiSolution
    certificate: Certificate
    method: str
    X0: np.ndarray
    J2_stderr: float = 0.0
    linear: Optional[LinearSolution] = None
    paths_are_means: bool = False


def deterministic_path_fn(path: Optional[VectorPath], grid: TimeGrid, dim: int) -> Callable:
    """Cubic-spline interpolant of a deterministic node path; zero when absent."""
    if path is None:
        zero = np.zeros(dim)
        return lambda t: zero
    if not path.is_deterministic:
        raise InvalidArgument("control must be deterministic here")
    if path.grid.N != grid.N or path.dim != dim:
        raise InvalidArgument(f"control must be a {dim}-dimensional path on the solver grid")
    if grid.N < 3:
        vals = path.values[0]
        return lambda t: vals[min(int(round(t / grid.dt)), grid.N)]
    spline = CubicSpline(grid.nodes, path.values[0], axis=0)
    return lambda t: spline(t)


def follower_system(coeffs: GameCoefficients, xi: TerminalControl, u1: Optional[VectorPath],
                    grid: TimeGrid) -> BfsdeSystem:
    """Hamiltonian system of the follower: forward adjoint Ȳ, backward state X̄.

    For ξ = ξ0 + ξ1 W(T) the forward state is augmented by W itself.
    """
    n = coeffs.n
    u1f = deterministic_path_fn(u1, grid, coeffs.m1)
    aug = 1 if xi.kind == "linear_in_w" else 0
    ny = n + aug

    def pad(M, rows, cols):
        out = np.zeros((rows, cols))
        out[:M.shape[0], :M.shape[1]] = M
        return out

    snap = coeffs.snapshot
    kwargs = dict(
        bY=lambda t: pad(-snap(t).A.T, ny, ny),
        bX=lambda t: pad(snap(t).Q2, ny, n),
        sY=lambda t: pad(-snap(t).C.T, ny, ny),
        sZ=lambda t: pad(snap(t).S2, ny, n),
        fY=lambda t: pad(snap(t).N2, n, ny),
        fX=lambda t: snap(t).A,
        fZ=lambda t: snap(t).C,
        f0=lambda t: (snap(t).B1 @ u1f(t))[:, None],
    )
    if aug:
        s0 = np.zeros((ny, 1))
        s0[n, 0] = 1.0
        kwargs["s0"] = s0
    H = pad(coeffs.H2, ny, n)
    if xi.kind == "deterministic":
        G, g0 = np.zeros((n, ny)), xi.xi0
    elif xi.kind == "linear_in_w":
        G = np.zeros((n, ny))
        G[:, n] = xi.xi1
        g0 = xi.xi0
    else:
        G, g0 = np.zeros((n, ny)), np.zeros(n)
    return BfsdeSystem.build(ny, n, H=H, G=G, g0=g0, label="follower", **kwargs)


def _check_certificate(coeffs, grid):
    sre1 = solve_sre1(coeffs, grid=grid)
    cert = follower_convexity_certificate(sre1, coeffs.H2)
    if not cert.ok:
        raise NotConvex("follower cost is not certified convex", margin=cert.margin)
    return sre1, cert


def _stack(grid, fn, shape):
    return np.stack([fn(t) for t in grid.nodes]).reshape((grid.N + 1,) + shape)


def solve_blq(coeffs: GameCoefficients, xi: TerminalControl, u1: Optional[VectorPath] = None,
              grid: Optional[TimeGrid] = None, ensemble: Optional[ScenarioEnsemble] = None,
              picard_options: Optional[dict] = None) -> FollowerSolution:
    """Optimal follower response ū2 = R22^{-1} B2ᵀ Ȳ.

    Deterministic and linear-in-W terminal data are solved exactly through
    the linear decoupling; sampled terminal data go through the Picard
    iteration. Path outputs are scenario paths when an ensemble is given and
    mean paths otherwise.
    """
    grid = grid or coeffs.grid
    if xi.n != coeffs.n:
        raise InvalidArgument("ξ has the wrong dimension")
    sre1, cert = _check_certificate(coeffs, grid)
    system = follower_system(coeffs, xi, u1, grid)
    n, m2 = coeffs.n, coeffs.m2
    R22inv_B2t = _stack(grid, lambda t: coeffs.snapshot(t).R22inv @ coeffs.snapshot(t).B2.T, (m2, n))

    if xi.kind == "sampled":
        if ensemble is None:
            ensemble = xi.ensemble
        xs = xi.values(ensemble)
        sys_s = system.with_terminal(lambda YT, mean: xs, 0.0, label="follower-sampled")
        res = picard_solve(sys_s, grid, ensemble, **(picard_options or {}))
        Yv = res.Y
        Zn = np.concatenate([res.Z, res.Z[:, -1:]], axis=1)
        Xv = res.X
        u2 = np.einsum("kij,mkj->mki", R22inv_B2t, Yv)
        J2, se = _mc_follower_cost(coeffs, grid, Xv, Zn, u2)
        resid = _stationarity(coeffs, grid, u2, Yv)
        return FollowerSolution(VectorPath(grid, u2), VectorPath(grid, Xv), VectorPath(grid, Zn),
                                VectorPath(grid, Yv), J2, resid, sre1, cert, "picard",
                                res.X0, se, None, False)

    lin = solve_linear(system, grid)
    sel = np.zeros((n, system.ny))
    sel[:, :n] = np.eye(n)
    J2 = follower_cost_exact(coeffs, grid, lin, sel)
    random = not system.is_diffusion_free(grid)
    if ensemble is not None and random:
        Yf, Xv, Zv = lin.simulate(ensemble)
        Yv = Yf[:, :, :n]
        means = False
    else:
        Yv = (lin.mean_Y @ sel.T)[None]
        Xv, Zv = lin.mean_X[None], lin.mean_Z[None]
        means = random
    u2 = np.einsum("kij,mkj->mki", R22inv_B2t, Yv)
    resid = _stationarity(coeffs, grid, u2, Yv)
    return FollowerSolution(VectorPath(grid, u2), VectorPath(grid, Xv), VectorPath(grid, Zv),
                            VectorPath(grid, Yv), J2, resid, sre1, cert, "linear", lin.X0, 0.0,
                            lin, means)


def _stationarity(coeffs, grid, u2, Y) -> float:
    R22 = _stack(grid, lambda t: coeffs.snapshot(t).R22, (coeffs.m2, coeffs.m2))
    B2t = _stack(grid, lambda t: coeffs.snapshot(t).B2.T, (coeffs.m2, coeffs.n))
    r = np.einsum("kij,mkj->mki", R22, u2) - np.einsum("kij,mkj->mki", B2t, Y)
    return float(np.max(np.linalg.norm(r, axis=2)))


def follower_cost_exact(coeffs: GameCoefficients, grid: TimeGrid, lin: LinearSolution,
                        sel: np.ndarray) -> float:
    """J2 at the follower optimum from exact moments of the linear solution."""
    K = grid.N + 1
    snaps = [coeffs.snapshot(t) for t in grid.nodes]
    u_L = np.stack([s.R22inv @ s.B2.T @ sel for s in snaps])
    run = (lin.expect_quadratic(lin.P, lin.p, np.stack([s.Q2 for s in snaps]))
           + lin.expect_quadratic(lin.ZY, lin.z0, np.stack([s.S2 for s in snaps]))
           + lin.expect_quadratic(u_L, np.zeros((K, coeffs.m2)), np.stack([s.R22 for s in snaps])))
    x0 = lin.X0
    return 0.5 * (float(time_integral(run, grid)) + float(x0 @ coeffs.H2 @ x0))


def _mc_follower_cost(coeffs, grid, X, Z, u2):
    snaps = [coeffs.snapshot(t) for t in grid.nodes]
    Q2 = np.stack([s.Q2 for s in snaps])
    S2 = np.stack([s.S2 for s in snaps])
    R22 = np.stack([s.R22 for s in snaps])
    run = (np.einsum("mki,kij,mkj->mk", X, Q2, X) + np.einsum("mki,kij,mkj->mk", Z, S2, Z)
           + np.einsum("mki,kij,mkj->mk", u2, R22, u2))
    per_path = 0.5 * (time_integral(run.T, grid) + np.einsum("mi,ij,mj->m", X[:, 0], coeffs.H2, X[:, 0]))
    se = float(per_path.std(ddof=1) / math.sqrt(len(per_path))) if len(per_path) > 1 else 0.0
    return float(per_path.mean()), se


# ---------------------------------------------------------------------------
# cost evaluation


class Costs(tuple):
    """(J1, J2) with Monte Carlo standard errors attached."""

    def __new__(cls, J1, J2, J1_stderr=0.0, J2_stderr=0.0, X=None, Z=None):
        obj = super().__new__(cls, (float(J1), float(J2)))
        obj.J1_stderr, obj.J2_stderr, obj.X, obj.Z = float(J1_stderr), float(J2_stderr), X, Z
        return obj

    @property
    def J1(self) -> float:
        return self[0]

    @property
    def J2(self) -> float:
        return self[1]


def _vp(path, grid, dim, name):
    if path is None:
        return VectorPath.zeros(grid, dim)
    if not isinstance(path, VectorPath):
        path = VectorPath(grid, np.asarray(path, dtype=float))
    if path.grid.N != grid.N or path.dim != dim:
        raise InvalidArgument(f"{name} must be a {dim}-dimensional path on the grid")
    return path


def evaluate_costs(coeffs: GameCoefficients, xi: TerminalControl, u1=None, u2=None,
                   grid: Optional[TimeGrid] = None, ensemble: Optional[ScenarioEnsemble] = None,
                   degree: int = 2) -> Costs:
    """Both cost functionals on the state re-simulated from (ξ, u1, u2).

    Deterministic inputs give Z ≡ 0 and a backward RK4 solve; random inputs
    use a regression recursion on the ensemble.
    """
    grid = grid or coeffs.grid
    n, m1, m2 = coeffs.n, coeffs.m1, coeffs.m2
    if xi.n != n:
        raise InvalidArgument("ξ has the wrong dimension")
    u1 = _vp(u1, grid, m1, "u1")
    u2 = _vp(u2, grid, m2, "u2")
    snaps = [coeffs.snapshot(t) for t in grid.nodes]
    Q1 = np.stack([s.Q1 for s in snaps])
    Q2 = np.stack([s.Q2 for s in snaps])
    S1 = np.stack([s.S1 for s in snaps])
    S2 = np.stack([s.S2 for s in snaps])
    R11 = np.stack([s.R11 for s in snaps])
    R22 = np.stack([s.R22 for s in snaps])

    random = xi.is_random or not (u1.is_deterministic and u2.is_deterministic)
    if not random:
        f1 = deterministic_path_fn(u1, grid, m1)
        f2 = deterministic_path_fn(u2, grid, m2)

        def rhs(t, x):
            s = coeffs.snapshot(t)
            return s.A @ x + (s.B1 @ f1(t) + s.B2 @ f2(t))[:, None]

        X = integrate_ode(rhs, xi.xi0[:, None], grid, "backward")[:, :, 0][None]
        Z = np.zeros_like(X)
        XT = xi.xi0[None]
    else:
        if ensemble is None:
            ensemble = xi.ensemble
        if ensemble is None:
            raise InvalidArgument("random inputs need a scenario ensemble")
        M = ensemble.n_paths
        U1 = np.broadcast_to(u1.values, (M,) + u1.values.shape[1:])
        U2 = np.broadcast_to(u2.values, (M,) + u2.values.shape[1:])
        for U in (u1, u2):
            if U.n_paths not in (1, M):
                raise InvalidArgument("control paths must match the ensemble")
        XT = xi.values(ensemble)
        X = np.empty((M, grid.N + 1, n))
        Z = np.empty((M, grid.N + 1, n))
        X[:, -1] = XT
        dt, W, dW = grid.dt, ensemble.W, ensemble.increments
        for k in range(grid.N - 1, -1, -1):
            s = snaps[k]
            cols = [W[:, k]] + [U1[:, k, j] for j in range(m1)] + [U2[:, k, j] for j in range(m2)]
            Phi = polynomial_features(cols, degree)
            nxt = X[:, k + 1]
            proj = Projector(Phi)
            e1 = proj(nxt)
            fit = np.hstack([e1, proj((nxt - e1) * (dW[:, k:k + 1] / dt))])
            e1, zk = fit[:, :n], fit[:, n:]
            drv = e1 @ s.A.T + U1[:, k] @ s.B1.T + U2[:, k] @ s.B2.T + zk @ s.C.T
            X[:, k] = e1 - dt * drv
            Z[:, k] = zk
        X[:, 0] = X[:, 0].mean(axis=0)
        Z[:, -1] = Z[:, -2]
        U1, U2 = np.asarray(U1), np.asarray(U2)
        u1 = VectorPath(grid, U1)
        u2 = VectorPath(grid, U2)

    U1v, U2v = u1.values, u2.values

    def q(P, W):
        return np.einsum("mki,kij,mkj->mk", P, W, P)

    run1 = q(X, Q1) + q(Z, S1) + q(U1v, R11)
    run2 = q(X, Q2) + q(Z, S2) + q(U2v, R22)
    x0 = X[:, 0]
    j1 = 0.5 * (time_integral(run1.T, grid) + np.einsum("mi,ij,mj->m", XT, coeffs.G1, XT)
                + np.einsum("mi,ij,mj->m", x0, coeffs.H1, x0))
    j2 = 0.5 * (time_integral(run2.T, grid) + np.einsum("mi,ij,mj->m", x0, coeffs.H2, x0))
    M = max(j1.size, j2.size)

    def se(v):
        return float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0

    return Costs(j1.mean(), j2.mean(), se(j1) if M > 1 else 0.0, se(j2) if M > 1 else 0.0, X, Z)


def perturbation_gain(coeffs: GameCoefficients, sol: FollowerSolution, xi: TerminalControl,
                      v: VectorPath, eps: float, grid: Optional[TimeGrid] = None) -> float:
    """J2(ū2 + εv) - J2(ū2) for a deterministic direction v.

    The state is affine in the control, so the change is ε D(v) + ε² Q(v):
    D pairs the mean optimal state and control with the deterministic state
    response δX, and Q is the cost of v alone from zero terminal data.
    """
    grid = grid or coeffs.grid
    if sol.linear is None:
        raise InvalidArgument("exact perturbation needs the linear solution")
    v = _vp(v, grid, coeffs.m2, "v")
    zero = TerminalControl.deterministic(np.zeros(coeffs.n))
    base = evaluate_costs(coeffs, zero, None, v, grid)
    dX = base.X[0]
    lin = sol.linear
    snaps = [coeffs.snapshot(t) for t in grid.nodes]
    mX = lin.mean_X
    mU = sol.u2.mean()
    integrand = (np.einsum("ki,kij,kj->k", mX, np.stack([s.Q2 for s in snaps]), dX)
                 + np.einsum("ki,kij,kj->k", mU, np.stack([s.R22 for s in snaps]), v.values[0]))
    D = float(time_integral(integrand, grid)) + float(lin.X0 @ coeffs.H2 @ dX[0])
    return eps * D + eps * eps * base.J2


def gateaux_check(cost: Callable, point, direction, eps: float = 1e-4,
                  feasible: Optional[Callable] = None) -> float:
    """Central difference (J(x + εd) - J(x - εd)) / 2ε."""
    x = np.asarray(point, dtype=float)
    d = np.asarray(direction, dtype=float)
    if x.shape != d.shape:
        raise InvalidArgument("direction must match the point's shape")
    plus, minus = x + eps * d, x - eps * d
    if feasible is not None and not (feasible(plus) and feasible(minus)):
        raise InvalidArgument("perturbed point leaves the admissible set")
    return (float(cost(plus)) - float(cost(minus))) / (2 * eps)


def completion_of_squares(coeffs: GameCoefficients, u2: VectorPath, grid: Optional[TimeGrid] = None,
                          M=None) -> tuple:
    """Both sides of the square-completion identity for a deterministic u2.

    The state x runs from x(T) = 0, so z ≡ 0. The direct side is
    ⟨H2 x(0), x(0)⟩ + ∫ ⟨Q2 x, x⟩ + ⟨R22 u2, u2⟩; the completed side is
    ⟨(H2 + P(0)) x(0), x(0)⟩ + ∫ |u2 + R22⁻¹B2ᵀP x|²_{R22} + |(P + S2)⁻¹CᵀP x|²_{P + S2}
    with P the follower Riccati solution. Returns (direct, completed).
    """
    grid = grid or coeffs.grid
    u2 = _vp(u2, grid, coeffs.m2, "u2")
    ufn = deterministic_path_fn(u2, grid, coeffs.m2)

    def rhs(t, x):
        c = coeffs.snapshot(t)
        return c.A @ x + c.B2 @ ufn(t)

    x = integrate_ode(rhs, np.zeros(coeffs.n), grid, "backward")
    P = solve_sre1(coeffs, M, grid).P.values
    u = u2.values[0]
    snaps = [coeffs.snapshot(t) for t in grid.nodes]
    direct_int, control_sq, diffusion_sq = (np.empty(grid.N + 1) for _ in range(3))
    for k, c in enumerate(snaps):
        direct_int[k] = x[k] @ c.Q2 @ x[k] + u[k] @ c.R22 @ u[k]
        w = u[k] + c.R22inv @ c.B2.T @ P[k] @ x[k]
        control_sq[k] = w @ c.R22 @ w
        v = c.C.T @ P[k] @ x[k]
        diffusion_sq[k] = v @ np.linalg.solve(P[k] + c.S2, v)
    x0 = x[0]
    direct = float(x0 @ coeffs.H2 @ x0 + time_integral(direct_int, grid))
    completed = float(x0 @ (coeffs.H2 + P[0]) @ x0 + time_integral(control_sq + diffusion_sq, grid))
    return direct, completed
