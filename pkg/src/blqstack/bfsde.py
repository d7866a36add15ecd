"""Coupled backward-forward systems with mixed initial-terminal conditions.

The forward component Y starts from an affine function of X(0); the backward
component X ends at a function of Y(T)::

    dY = (bY Y + bX X + bZ Z + bEZ E[Z] + b0) ds + (sY Y + sX X + sZ Z + s0) dW
    dX = (fY Y + fX X + fZ Z + fEZ E[Z] + f0) ds + Z dW
    Y(0) = H X(0) + h0,   X(T) = G Y(T) + Gbar E[Y(T)] + g0   (or a Lipschitz map)

Linear systems are solved exactly through a deterministic decoupling field;
anything else goes through the discounted Picard iteration with least-squares
Monte Carlo conditional expectations.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import minimize

from .core import ScenarioEnsemble, TimeGrid, integrate_ode, time_integral
from .errors import IllConditionedRegression, InvalidArgument, NoConvergence, RepresentationFailure
from .riccati import solve_linear_decoupling

_DRIFT_Y = ("bY", "bX", "bZ", "bEZ", "b0")
_DRIFT_X = ("fY", "fX", "fZ", "fEZ", "f0")


def _shapes(ny: int, nx: int) -> Dict[str, Tuple[int, int]]:
    return {
        "bY": (ny, ny), "bX": (ny, nx), "bZ": (ny, nx), "bEZ": (ny, nx), "b0": (ny, 1),
        "sY": (ny, ny), "sX": (ny, nx), "sZ": (ny, nx), "s0": (ny, 1),
        "fY": (nx, ny), "fX": (nx, nx), "fZ": (nx, nx), "fEZ": (nx, nx), "f0": (nx, 1),
    }


def _matrix(value, shape, name) -> np.ndarray:
    M = np.asarray(value, dtype=float)
    if shape[1] == 1 and M.ndim <= 1:
        M = M.reshape(-1, 1)
    M = np.atleast_2d(M)
    if M.shape != shape:
        raise InvalidArgument(f"{name} must have shape {shape}, got {M.shape}")
    return M


@dataclass(eq=False)
class BfsdeSystem:
    ny: int
    nx: int
    coeff_fns: Dict[str, Callable[[float], np.ndarray]]
    H: np.ndarray
    h0: np.ndarray
    G: np.ndarray
    Gbar: np.ndarray
    g0: np.ndarray
    terminal_fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    terminal_lipschitz: Optional[float] = None
    label: str = ""
    _cache: Dict[float, Dict[str, np.ndarray]] = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, ny: int, nx: int, *, H=None, h0=None, G=None, Gbar=None, g0=None,
              terminal_fn=None, terminal_lipschitz=None, label: str = "", **coeffs) -> "BfsdeSystem":
        shapes = _shapes(ny, nx)
        unknown = set(coeffs) - set(shapes)
        if unknown:
            raise InvalidArgument(f"unknown coefficient(s): {sorted(unknown)}")
        fns = {}
        for key, shape in shapes.items():
            value = coeffs.get(key)
            if value is None:
                zero = np.zeros(shape)
                fns[key] = lambda t, z=zero: z
            elif callable(value):
                _matrix(value(0.0), shape, key)
                fns[key] = lambda t, f=value, s=shape, k=key: _matrix(f(t), s, k)
            else:
                const = _matrix(value, shape, key)
                fns[key] = lambda t, c=const: c
        H = np.zeros((ny, nx)) if H is None else _matrix(H, (ny, nx), "H")
        G = np.zeros((nx, ny)) if G is None else _matrix(G, (nx, ny), "G")
        Gbar = np.zeros((nx, ny)) if Gbar is None else _matrix(Gbar, (nx, ny), "Gbar")
        h0 = np.zeros(ny) if h0 is None else _matrix(h0, (ny, 1), "h0")[:, 0]
        g0 = np.zeros(nx) if g0 is None else _matrix(g0, (nx, 1), "g0")[:, 0]
        if terminal_fn is not None and terminal_lipschitz is None:
            raise InvalidArgument("a nonlinear terminal map needs its Lipschitz constant")
        return cls(ny, nx, fns, H, h0, G, Gbar, g0, terminal_fn, terminal_lipschitz, label)

    def coefficients(self, t: float) -> Dict[str, np.ndarray]:
        key = float(t)
        hit = self._cache.get(key)
        if hit is None:
            hit = {k: f(key) for k, f in self.coeff_fns.items()}
            self._cache[key] = hit
        return hit

    def with_terminal(self, fn, lipschitz: float, label: Optional[str] = None) -> "BfsdeSystem":
        return BfsdeSystem(self.ny, self.nx, self.coeff_fns, self.H, self.h0, self.G, self.Gbar,
                           self.g0, fn, float(lipschitz), label or self.label)

    @property
    def is_linear(self) -> bool:
        return self.terminal_fn is None

    def has_mean_field(self, grid: TimeGrid) -> bool:
        if np.any(self.Gbar):
            return True
        return any(np.any(self.coefficients(t)[k]) for t in grid.nodes for k in ("bEZ", "fEZ"))

    def is_diffusion_free(self, grid: TimeGrid) -> bool:
        """True when Z ≡ 0 is consistent: the forward diffusion vanishes
        whenever Z does, so deterministic paths solve the system."""
        return not any(np.any(self.coefficients(t)[k]) for t in grid.nodes
                       for k in ("sY", "sX", "s0"))

    def terminal(self, YT: np.ndarray) -> np.ndarray:
        """Terminal values X(T) for scenario rows ``YT`` of shape (M, ny)."""
        mean = YT.mean(axis=0)
        if self.terminal_fn is not None:
            return np.asarray(self.terminal_fn(YT, mean), dtype=float).reshape(YT.shape[0], self.nx)
        return YT @ self.G.T + mean @ self.Gbar.T + self.g0


# ---------------------------------------------------------------------------
# exact solution of linear systems


@dataclass(frozen=True, eq=False)
class LinearSolution:
    """X = P Y + p and Z = ZY Y + z0 at the nodes, with exact first and second
    moments of the closed-loop forward state."""

    system: BfsdeSystem
    grid: TimeGrid
    P: np.ndarray
    p: np.ndarray
    ZY: np.ndarray
    z0: np.ndarray
    Y0: np.ndarray
    mean_Y: np.ndarray
    second_Y: np.ndarray
    positivity_log: np.ndarray

    @property
    def X0(self) -> np.ndarray:
        return self.P[0] @ self.Y0 + self.p[0]

    @property
    def mean_X(self) -> np.ndarray:
        return np.einsum("kij,kj->ki", self.P, self.mean_Y) + self.p

    @property
    def mean_Z(self) -> np.ndarray:
        return np.einsum("kij,kj->ki", self.ZY, self.mean_Y) + self.z0

    @property
    def cov_Y(self) -> np.ndarray:
        return self.second_Y - np.einsum("ki,kj->kij", self.mean_Y, self.mean_Y)

    def expect_quadratic(self, L: np.ndarray, l: np.ndarray, W: np.ndarray,
                         nodes=slice(None)) -> np.ndarray:
        """E <W (L Y + l), L Y + l> at the selected nodes; arguments are stacked per node."""
        second, mean = self.second_Y[nodes], self.mean_Y[nodes]
        if not (L.shape[0] == l.shape[0] == W.shape[0] == mean.shape[0]):
            raise InvalidArgument("per-node stacks do not match the selected nodes")
        LtWL = np.einsum("kri,krs,ksj->kij", L, W, L)
        quad = np.einsum("kij,kji->k", LtWL, second)
        cross = 2 * np.einsum("kr,krs,ksj,kj->k", l, W, L, mean)
        const = np.einsum("kr,krs,ks->k", l, W, l)
        return quad + cross + const

    def simulate(self, ensemble: ScenarioEnsemble):
        """Euler-Maruyama paths of the closed loop; returns (Y, X, Z) arrays of
        shape (M, N+1, .)."""
        grid, sysm = self.grid, self.system
        M, N, dt = ensemble.n_paths, grid.N, grid.dt
        Y = np.empty((M, N + 1, sysm.ny))
        Y[:, 0] = self.Y0
        for k, t in enumerate(grid.nodes[:-1]):
            A, beta, Cm, sigma = _closed_loop(sysm.coefficients(t), self.P[k], self.p[k],
                                              self.ZY[k], self.z0[k])
            y = Y[:, k]
            dW = ensemble.increments[:, k:k + 1]
            Y[:, k + 1] = y + (y @ A.T + beta) * dt + (y @ Cm.T + sigma) * dW
        X = np.einsum("kij,mkj->mki", self.P, Y) + self.p
        Z = np.einsum("kij,mkj->mki", self.ZY, Y) + self.z0
        return Y, X, Z


def _closed_loop(c, P, p, ZY, z0):
    A = c["bY"] + c["bX"] @ P + c["bZ"] @ ZY
    beta = c["bX"] @ p + c["bZ"] @ z0 + c["b0"][:, 0]
    Cm = c["sY"] + c["sX"] @ P + c["sZ"] @ ZY
    sigma = c["sX"] @ p + c["sZ"] @ z0 + c["s0"][:, 0]
    return A, beta, Cm, sigma


def solve_linear(system: BfsdeSystem, grid: TimeGrid) -> LinearSolution:
    """Exact solution of a linear system with deterministic coefficients."""
    if not system.is_linear:
        raise InvalidArgument("terminal map is nonlinear; use picard_solve")
    if system.has_mean_field(grid):
        raise InvalidArgument("mean-field coefficients are handled by picard_solve only")
    ny, nx = system.ny, system.nx
    path, values, log, parts = solve_linear_decoupling(system, grid)
    P = values[:, :, :ny]
    p = values[:, :, ny]
    ZY = np.empty((grid.N + 1, nx, ny))
    z0 = np.empty((grid.N + 1, nx))
    for k, t in enumerate(grid.nodes):
        _, gain, zc = parts(t, P[k], p[k][:, None])
        ZY[k], z0[k] = gain, zc[:, 0]

    lhs = np.eye(ny) - system.H @ P[0]
    if abs(np.linalg.det(lhs)) < 1e-12:
        raise RepresentationFailure("initial coupling I - H P(0) is singular")
    Y0 = np.linalg.solve(lhs, system.H @ p[0] + system.h0)

    def moments(t, S):
        X = path.at(t)
        Pt, pt = X[:, :ny], X[:, ny:]
        _, gain, zc = parts(t, Pt, pt)
        A, beta, Cm, sigma = _closed_loop(system.coefficients(t), Pt, pt[:, 0], gain, zc[:, 0])
        m, Q = S[:, -1], S[:, :-1]
        dm = A @ m + beta
        Cmm = np.outer(Cm @ m, sigma)
        dQ = (A @ Q + Q @ A.T + np.outer(beta, m) + np.outer(m, beta)
              + Cm @ Q @ Cm.T + Cmm + Cmm.T + np.outer(sigma, sigma))
        return np.hstack([dQ, dm[:, None]])

    start = np.hstack([np.outer(Y0, Y0), Y0[:, None]])
    mom = integrate_ode(moments, start, grid, "forward")
    second = 0.5 * (mom[:, :, :-1] + np.swapaxes(mom[:, :, :-1], 1, 2))
    return LinearSolution(system, grid, P, p, ZY, z0, Y0, mom[:, :, -1], second, log)


# ---------------------------------------------------------------------------
# discounted norm


def _phi1(x):
    return np.where(np.abs(x) < 1e-8, 1 + x / 2, np.expm1(x) / np.where(x == 0, 1, x))


def _phi2(x):
    small = np.abs(x) < 1e-4
    safe = np.where(small, 1.0, x)
    return np.where(small, 0.5 + x / 6 + x * x / 24, (np.expm1(safe) - safe) / (safe * safe))


def exp_weights(grid: TimeGrid, rho: float):
    """Exact weights of ∫ e^{-rho t} v(t) dt for piecewise-linear v (node
    weights) and piecewise-constant v (interval weights)."""
    h, t = grid.dt, grid.nodes[:-1]
    x = -rho * h
    base = np.exp(-rho * t)
    I0 = h * _phi1(x)
    I1 = h * h * _phi2(x)
    interval = base * I0
    left = base * (I0 - I1 / h)
    right = base * (I1 / h)
    nodes = np.zeros(grid.N + 1)
    nodes[:-1] += left
    nodes[1:] += right
    return nodes, interval


def discounted_norm(X, Z, X0, rho: float, grid: TimeGrid) -> float:
    """sqrt(|X(0)|^2 + E∫e^{-rho t}|X|^2 dt + E∫e^{-rho t}|Z|^2 dt).

    ``X`` has shape (M, N+1, n) (or (N+1, n)); ``Z`` is given on intervals
    (M, N, n) or at nodes (M, N+1, n).
    """
    wn, wi = exp_weights(grid, rho)
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    if X.ndim == 2:
        X = X[None]
    if Z.ndim == 2:
        Z = Z[None]
    xs = (X ** 2).sum(axis=2).mean(axis=0)
    zs = (Z ** 2).sum(axis=2).mean(axis=0)
    total = float(wn @ xs)
    total += float(wi @ zs) if zs.size == grid.N else float(wn @ zs)
    total += float(np.sum(np.asarray(X0, dtype=float) ** 2))
    return math.sqrt(max(total, 0.0))


# ---------------------------------------------------------------------------
# least-squares Monte Carlo


def polynomial_features(columns: List[np.ndarray], degree: int) -> np.ndarray:
    """Total-degree polynomial basis in centred, scaled columns.

    The scale is max(sd, floor), so a column with negligible spread becomes a
    negligible feature rather than standardised round-off. Every operation is
    continuous in the data, which Picard sweeps rely on.
    """
    kept = []
    for v in columns:
        floor = 1e-6 * (1.0 + np.abs(v).max())
        kept.append((v - v.mean()) / max(v.std(), floor))
    M = columns[0].shape[0] if columns else 1
    feats = [np.ones(M)]
    for d in range(1, degree + 1):
        for combo in itertools.combinations_with_replacement(range(len(kept)), d):
            f = np.ones(M)
            for j in combo:
                f = f * kept[j]
            feats.append(f)
    return np.stack(feats, axis=1)


class Projector:
    """Least-squares projection onto the span of ``Phi``, damped along
    collinear directions."""

    def __init__(self, Phi: np.ndarray):
        M, k = Phi.shape
        if M <= k:
            raise IllConditionedRegression(f"{M} scenarios cannot fit {k} basis functions",
                                           scenarios=M, basis=k)
        w, V = np.linalg.eigh(Phi.T @ Phi / M)
        # a relative ridge shift keeps the fit continuous in the data, unlike
        # hard truncation, so successive Picard sweeps cannot flip the basis
        self._Phi, self._V, self._w, self._M = Phi, V, np.maximum(w, 0.0) + 1e-8 * w.max(), M

    def __call__(self, targets: np.ndarray) -> np.ndarray:
        V = self._V
        coef = V @ ((V.T @ (self._Phi.T @ targets / self._M)) / self._w[:, None])
        return self._Phi @ coef


def regress(Phi: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Fitted values of the least-squares projection of ``targets`` on ``Phi``."""
    return Projector(Phi)(targets)


@dataclass
class PicardTrace:
    norms: List[float] = field(default_factory=list)
    converged: bool = False

    @property
    def iterations(self) -> int:
        return len(self.norms)

    @property
    def ratios(self) -> List[float]:
        n = self.norms
        return [n[i] / n[i - 1] for i in range(1, len(n)) if n[i - 1] > 0]

    @property
    def geometric_ratio(self) -> float:
        r = self.ratios[1:] or self.ratios
        return float(np.median(r)) if r else 0.0

    def to_dict(self):
        return {"norms": list(self.norms), "iterations": self.iterations,
                "converged": self.converged, "geometric_ratio": self.geometric_ratio}


@dataclass(frozen=True, eq=False)
class PicardResult:
    Y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    X0: np.ndarray
    x0_stderr: np.ndarray
    mean_Z: np.ndarray
    trace: PicardTrace
    rho: float
    mode: str
    grid: TimeGrid


@dataclass
class _State:
    X: np.ndarray
    Z: np.ndarray
    X0: np.ndarray
    Y: Optional[np.ndarray] = None
    X0_sd: Optional[np.ndarray] = None


class _Sweeper:
    """One application of the Picard map: forward Y given (X, Z, X(0)), then
    backward (X, Z) given Y."""

    def __init__(self, system: BfsdeSystem, grid: TimeGrid, ensemble: Optional[ScenarioEnsemble],
                 degree: int):
        self.sys, self.grid, self.ens, self.degree = system, grid, ensemble, degree
        self.deterministic = ensemble is None
        self.M = 1 if ensemble is None else ensemble.n_paths

    def zero_state(self) -> _State:
        M, N, nx = self.M, self.grid.N, self.sys.nx
        return _State(np.zeros((M, N + 1, nx)), np.zeros((M, N, nx)), np.zeros(nx))

    def __call__(self, s: _State) -> _State:
        return self._ode(s) if self.deterministic else self._lsmc(s)

    # deterministic data: both halves are ODEs
    def _ode(self, s: _State) -> _State:
        sysm, grid = self.sys, self.grid
        Xs = CubicSpline(grid.nodes, s.X[0], axis=0)

        def frhs(t, y):
            c = sysm.coefficients(t)
            return c["bY"] @ y + c["bX"] @ Xs(t)[:, None] + c["b0"]

        Y0 = sysm.H @ s.X0 + sysm.h0
        Y = integrate_ode(frhs, Y0[:, None], grid, "forward")[:, :, 0]
        Ys = CubicSpline(grid.nodes, Y, axis=0)

        def brhs(t, x):
            c = sysm.coefficients(t)
            return c["fY"] @ Ys(t)[:, None] + c["fX"] @ x + c["f0"]

        XT = sysm.terminal(Y[-1:])[0]
        X = integrate_ode(brhs, XT[:, None], grid, "backward")[:, :, 0]
        return _State(X[None], np.zeros_like(s.Z), X[0].copy(), Y[None])

    def _lsmc(self, s: _State) -> _State:
        # Heun drift forward and Crank-Nicolson backward. The regression
        # estimate of Z on [t_k, t_k+1] is a midpoint value, so it enters the
        # driver by the midpoint rule and the forward diffusion through the
        # average of neighbouring estimates. Regressing the centred increment
        # keeps the estimator variance O(1) in dt.
        sysm, grid, ens = self.sys, self.grid, self.ens
        M, N, dt, nx = self.M, grid.N, grid.dt, sysm.nx
        dW, W = ens.increments.T[:, :, None], ens.W.T
        coef = self._coef()
        Xo = np.ascontiguousarray(s.X.transpose(1, 0, 2))
        Zm = s.Z.transpose(1, 0, 2)
        Zo = np.empty((N + 1, M, nx))
        Zo[0], Zo[N] = Zm[0], Zm[N - 1]
        Zo[1:N] = 0.5 * (Zm[:-1] + Zm[1:])

        Y = np.empty((N + 1, M, sysm.ny))
        Y[0] = sysm.H @ s.X0 + sysm.h0
        for k in range(N):
            y = Y[k]
            d0 = _affine(coef[k], "b", y, Xo[k], Zo[k])
            noise = _affine(coef[k], "s", y, Xo[k], Zo[k]) * dW[k]
            pred = y + d0 * dt + noise
            Y[k + 1] = y + 0.5 * (d0 + _affine(coef[k + 1], "b", pred, Xo[k + 1], Zo[k + 1])) * dt \
                + noise
        X = np.empty((N + 1, M, nx))
        Z = np.empty((N, M, nx))
        X[N] = sysm.terminal(Y[N])
        G_next = _affine(coef[N], "f", Y[N], X[N], None)
        for k in range(N - 1, -1, -1):
            c, c1 = coef[k], coef[k + 1]
            proj = Projector(polynomial_features([W[k]] + [Y[k, :, j] for j in range(sysm.ny)],
                                                 self.degree))
            corrected = X[k + 1] - 0.5 * dt * G_next
            zk = proj((corrected - proj(corrected)) * (dW[k] / dt))
            tgt = X[k + 1] - 0.5 * dt * (G_next + _z_terms(c1, "f", zk))
            e = proj(tgt)
            rest = _affine(c, "f", Y[k], None, zk)
            rhs = e - 0.5 * dt * rest
            X[k] = rhs @ c["cn_inv"].T
            Z[k] = zk
            G_next = _affine(c, "f", Y[k], X[k], None)
        # per-path values at t=0 before the final projection give the sampling error
        raw = (rhs - e + tgt) @ coef[0]["cn_inv"].T
        X0 = X[0].mean(axis=0)
        X[0] = X0
        return _State(X.transpose(1, 0, 2), Z.transpose(1, 0, 2), X0, Y.transpose(1, 0, 2),
                      raw.std(axis=0, ddof=1))

    def _coef(self):
        if getattr(self, "_coef_cache", None) is None:
            dt = self.grid.dt
            out = []
            for t in self.grid.nodes:
                c = dict(self.sys.coefficients(t))
                c["cn_inv"] = np.linalg.inv(np.eye(self.sys.nx) + 0.5 * dt * c["fX"])
                c["nonzero"] = {key for key, v in c.items()
                                if isinstance(v, np.ndarray) and np.any(v)}
                out.append(c)
            self._coef_cache = out
        return self._coef_cache


_AFFINE_KEYS = {"b": ("bY", "bX", "bZ", "bEZ", "b0"), "s": ("sY", "sX", "sZ", None, "s0"),
                "f": ("fY", "fX", "fZ", "fEZ", "f0")}


def _affine(c, kind, y, x, z):
    """Drift, diffusion or driver row-wise; ``None`` omits the X or Z terms."""
    kY, kX, kZ, kE, k0 = _AFFINE_KEYS[kind]
    nz = c["nonzero"]
    out = np.broadcast_to(c[k0][:, 0], (y.shape[0], c[k0].shape[0])).copy()
    if kY in nz:
        out += y @ c[kY].T
    if x is not None and kX in nz:
        out += x @ c[kX].T
    if z is not None:
        out += _z_terms(c, kind, z)
    return out


def _z_terms(c, kind, z):
    _, _, kZ, kE, _ = _AFFINE_KEYS[kind]
    nz = c["nonzero"]
    out = z @ c[kZ].T if kZ in nz else np.zeros((z.shape[0], c[kZ].shape[0]))
    if kE is not None and kE in nz:
        out = out + c[kE] @ z.mean(axis=0)
    return out


def picard_solve(system: BfsdeSystem, grid: TimeGrid, ensemble: Optional[ScenarioEnsemble] = None,
                 rho: Optional[float] = None, tol: float = 1e-6, max_iter: int = 50,
                 degree: int = 2, stderr_batches: int = 0) -> PicardResult:
    """Picard iteration in the discounted norm.

    Without an ensemble the system must be diffusion-free and both halves of
    each sweep are integrated with RK4. With an ensemble the forward half is
    Euler-Maruyama and the backward half is a regression recursion on
    polynomials in (W(t), Y(t)). ``rho`` defaults to the certificate's choice.
    """
    if ensemble is not None and ensemble.n_paths == 1 and not np.any(ensemble.increments):
        ensemble = None
    if ensemble is None and not system.is_diffusion_free(grid):
        raise InvalidArgument("system has a diffusion term; supply a scenario ensemble")
    if rho is None:
        rho = certify(system, "general", grid=grid).rho
    sweep = _Sweeper(system, grid, ensemble, degree)
    state = sweep.zero_state()
    trace = PicardTrace()
    for _ in range(max_iter):
        new = sweep(state)
        trace.norms.append(discounted_norm(new.X - state.X, new.Z - state.Z, new.X0 - state.X0,
                                           rho, grid))
        state = new
        if trace.norms[-1] < tol:
            trace.converged = True
            break
    if not trace.converged:
        raise NoConvergence(f"Picard iteration did not reach {tol:g} in {max_iter} sweeps",
                            norms=list(trace.norms))
    stderr = np.zeros(system.nx)
    if ensemble is not None:
        stderr = state.X0_sd / math.sqrt(ensemble.n_paths)
    if ensemble is not None and stderr_batches >= 2:
        parts = np.array_split(np.arange(ensemble.n_paths), stderr_batches)
        est = [picard_solve(system, grid, ensemble.subset(idx), rho, tol, max_iter, degree).X0
               for idx in parts]
        stderr = np.std(est, axis=0, ddof=1) / math.sqrt(stderr_batches)
    return PicardResult(state.Y, state.X, state.Z, state.X0, stderr, state.Z.mean(axis=0), trace,
                        float(rho), "ode" if ensemble is None else "lsmc", grid)


@dataclass(frozen=True, eq=False)
class ExtrapolatedX0:
    """Richardson combination of Picard solutions on nested grids sharing
    the same Brownian paths; the error is estimated from batch means."""

    value: np.ndarray
    stderr: np.ndarray
    fine: PicardResult
    coarse: PicardResult
    batch_values: np.ndarray
    order: int

    def to_dict(self):
        return {"X0": self.value.tolist(), "stderr": self.stderr.tolist(), "order": self.order,
                "fine_trace": self.fine.trace.to_dict(), "coarse_trace": self.coarse.trace.to_dict(),
                "batches": self.batch_values.tolist()}


def picard_extrapolate(system: BfsdeSystem, grid: TimeGrid, ensemble: ScenarioEnsemble,
                       batches: int = 10, rho: Optional[float] = None, tol: float = 1e-9,
                       max_iter: int = 100, degree: int = 2, order: int = 2) -> ExtrapolatedX0:
    """X(0) with the O(dt^order) bias of the sweep removed.

    ``grid`` is the fine grid; the coarse run halves it and sums increments
    pairwise, so both runs see identical Brownian paths.
    """
    if batches < 2:
        raise InvalidArgument("need at least two batches for a standard error")
    coarse_ens = ensemble.coarsen(2)
    w = 2.0 ** order

    def combine(fine_ens, coarse):
        f = picard_solve(system, grid, fine_ens, rho, tol, max_iter, degree)
        c = picard_solve(system, coarse.grid, coarse, rho, tol, max_iter, degree)
        return f, c, (w * f.X0 - c.X0) / (w - 1.0)

    fine, coarse, value = combine(ensemble, coarse_ens)
    parts = np.array_split(np.arange(ensemble.n_paths), batches)
    vals = np.array([combine(ensemble.subset(i), coarse_ens.subset(i))[2] for i in parts])
    stderr = vals.std(axis=0, ddof=1) / math.sqrt(batches)
    return ExtrapolatedX0(value, stderr, fine, coarse, vals, order)


def picard_residual(system: BfsdeSystem, result: PicardResult,
                    ensemble: Optional[ScenarioEnsemble] = None, degree: int = 2) -> float:
    """Discounted-norm change from one further sweep at a returned fixed point."""
    if result.mode == "ode":
        ensemble = None
    sweep = _Sweeper(system, result.grid, ensemble, degree)
    s = _State(result.X, result.Z, result.X0, result.Y)
    new = sweep(s)
    return discounted_norm(new.X - s.X, new.Z - s.Z, new.X0 - s.X0, result.rho, result.grid)


# ---------------------------------------------------------------------------
# wellposedness certificates


KEYS = tuple(f"k{i}" for i in range(1, 13))


@dataclass(frozen=True)
class WellposednessCertificate:
    variant: str
    rho1: float
    rho2: float
    k: Dict[str, float]
    rho: float
    rho_bar1: float
    rho_bar2: float
    c: Dict[str, float]
    contraction_factor: float
    theta: float
    verdict: str
    condition_log: Tuple[dict, ...]
    epsilon: Optional[float] = None

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_dict(self):
        def num(x):
            return None if x is None or not np.isfinite(x) else float(x)
        return {
            "variant": self.variant, "rho1": num(self.rho1), "rho2": num(self.rho2),
            "k": {k: float(v) for k, v in self.k.items()}, "rho": num(self.rho),
            "rho_bar1": num(self.rho_bar1), "rho_bar2": num(self.rho_bar2),
            "c": {k: float(v) for k, v in self.c.items()},
            "contraction_factor": num(self.contraction_factor), "theta": num(self.theta),
            "epsilon": self.epsilon, "verdict": self.verdict,
            "condition_log": [dict(e, margin=num(e["margin"])) for e in self.condition_log],
        }


def _sup(grid: TimeGrid, fn) -> float:
    return max(float(fn(t)) for t in grid.nodes)


def _fro(M) -> float:
    return float(np.linalg.norm(np.atleast_2d(M)))


def system_constants(system: BfsdeSystem, grid: TimeGrid) -> Dict[str, float]:
    """Monotonicity and Lipschitz constants of a system, sup over the nodes."""
    co = system.coefficients

    def lmax(M):
        return float(np.linalg.eigvalsh(0.5 * (M + M.T)).max())

    out = {
        "rho1": _sup(grid, lambda t: lmax(co(t)["bY"])),
        "rho2": _sup(grid, lambda t: lmax(-co(t)["fX"])),
        "k1": _sup(grid, lambda t: _fro(co(t)["bX"])),
        "k2": _sup(grid, lambda t: _fro(co(t)["bZ"])),
        "k3": _sup(grid, lambda t: _fro(co(t)["bEZ"])),
        "k4": _sup(grid, lambda t: _fro(co(t)["fY"])),
        "k5": _sup(grid, lambda t: _fro(co(t)["fZ"])),
        "k6": _sup(grid, lambda t: _fro(co(t)["fEZ"])),
    }
    # |sY dy + sX dx + sZ dz|^2 <= j (|sY dy|^2 + ...) with j the number of active terms
    diff = {key: _sup(grid, lambda t, key=key: _fro(co(t)[key])) for key in ("sY", "sX", "sZ")}
    j = max(1, sum(v > 0 for v in diff.values()))
    out["k7"], out["k8"], out["k9"] = (math.sqrt(j) * diff[key] for key in ("sY", "sX", "sZ"))
    out["k10"] = _fro(system.H)
    out["k11"] = float(system.terminal_lipschitz) if system.terminal_fn is not None else _fro(system.G)
    out["k12"] = _fro(system.Gbar)
    return out


def game_constants(coeffs, variant: str, grid: Optional[TimeGrid] = None) -> Dict[str, float]:
    """Constant assignments for the leader's stacked system ("bfsde2") and the
    follower's Hamiltonian system ("follower")."""
    grid = grid or coeffs.grid
    snaps = [coeffs.snapshot(t) for t in grid.nodes]
    n = coeffs.n
    Zn = np.zeros((n, n))

    def sup(f):
        return max(float(f(c)) for c in snaps)

    rho_star = sup(lambda c: np.linalg.eigvalsh(-0.5 * (c.A + c.A.T)).max())
    normC = sup(lambda c: _fro(c.C))
    k = dict.fromkeys(KEYS, 0.0)
    if variant == "bfsde2":
        k["k1"] = sup(lambda c: _fro(np.block([[c.Q1, c.Q2], [c.Q2, Zn]])))
        k["k5"] = math.sqrt(2) * normC
        k["k7"] = 2 * normC
        k["k9"] = math.sqrt(2) * sup(lambda c: _fro(np.block([[c.S1, c.S2], [c.S2, Zn]])))
        k["k4"] = sup(lambda c: _fro(np.block([[c.N1, c.N2], [c.N2, Zn]])))
        k["k10"] = _fro(np.block([[coeffs.H1, coeffs.H2], [coeffs.H2, Zn]]))
        k["k11"] = _fro(np.linalg.inv(coeffs.G1))
    elif variant == "follower":
        k["k1"] = sup(lambda c: _fro(c.Q2))
        k["k5"] = normC
        k["k7"] = math.sqrt(2) * normC
        k["k9"] = math.sqrt(2) * sup(lambda c: _fro(c.S2))
        k["k4"] = sup(lambda c: _fro(c.N2))
        k["k10"] = _fro(coeffs.H2)
    else:
        raise InvalidArgument(f"unknown constant set {variant!r}")
    k.update(rho1=rho_star, rho2=rho_star, normC=normC)
    return k


def _phi(x: float, T: float) -> float:
    """(1 - e^{-xT}) / x, continuous at x = 0."""
    if abs(x * T) < 1e-10:
        return T
    return -math.expm1(-x * T) / x


def contraction_bound(k: Dict[str, float], rho1: float, rho2: float, rho: float,
                      c: Dict[str, float], T: float) -> Tuple[float, float, float]:
    """Squared Lipschitz bound of the Picard map in the discounted norm.

    Returns (bound, rho_bar1, rho_bar2); the bound is inf when a side
    condition fails.
    """
    def ratio(i):
        return k[f"k{i}"] / c[f"c{i}"] if k[f"k{i}"] > 0 else 0.0

    rb1 = rho - 2 * rho1 - ratio(1) - ratio(2) - ratio(3) - k["k7"] ** 2
    rb2 = -rho - 2 * rho2 - ratio(4) - ratio(5) - ratio(6)
    s56 = 1 - k["k5"] * c["c5"] - k["k6"] * c["c6"]
    if s56 <= 0 or k["k4"] * c["c4"] >= 1:
        return math.inf, rb1, rb2
    with np.errstate(over="ignore"):
        e1 = math.exp(min(-rb1 * T, 700.0))
        e2 = math.exp(min(-rb2 * T, 700.0))
    F2 = _phi(rb2, T) + max(1.0, e2) / (s56 * min(1.0, e2)) + max(1.0, e2)
    F1 = 2 * (k["k11"] ** 2 + k["k12"] ** 2) * max(1.0, e1) + k["k4"] * c["c4"] * _phi(rb1, T)
    Mx = max(k["k10"] ** 2, k["k1"] * c["c1"] + k["k8"] ** 2,
             k["k2"] * c["c2"] + k["k3"] * c["c3"] + k["k9"] ** 2)
    return F2 * F1 * Mx, rb1, rb2


def _unpack(z, k):
    c = {f"c{i}": math.exp(max(min(z[i], 50.0), -50.0)) for i in (1, 2, 3)}
    c["c4"] = (1.0 / (1.0 + math.exp(-z[4]))) / k["k4"] if k["k4"] > 0 else 1.0
    w5, w6 = math.exp(min(z[5], 50.0)), math.exp(min(z[6], 50.0))
    tot = 1.0 + w5 + w6
    c["c5"] = (w5 / tot) / k["k5"] if k["k5"] > 0 else 1.0
    c["c6"] = (w6 / tot) / k["k6"] if k["k6"] > 0 else 1.0
    return z[0], c


def optimise_contraction(k: Dict[str, float], rho1: float, rho2: float, T: float):
    """Minimise the squared bound over rho and the splitting constants."""
    default = {f"c{i}": 1.0 for i in range(1, 7)}
    Mx = max(k["k10"] ** 2, k["k1"] + k["k8"] ** 2, k["k2"] + k["k3"] + k["k9"] ** 2)
    if Mx == 0 or (k["k11"] == 0 and k["k12"] == 0 and k["k4"] == 0):
        rho = rho1 - rho2
        val, rb1, rb2 = contraction_bound(k, rho1, rho2, rho, _unpack(np.zeros(7), k)[1], T)
        return 0.0, rho, _unpack(np.zeros(7), k)[1], rb1, rb2

    def obj(z):
        rho, c = _unpack(z, k)
        val, _, _ = contraction_bound(k, rho1, rho2, rho, c, T)
        return math.log(val) if 0 < val < math.inf else (1e6 if val else -1e6)

    centre = rho1 - rho2 + k["k7"] ** 2 / 2
    best = None
    for shift in (0.0, -2.0, 2.0, -8.0, 8.0, -30.0, 30.0):
        z0 = np.zeros(7)
        z0[0] = centre + shift / max(T, 1e-12)
        res = minimize(obj, z0, method="Nelder-Mead",
                       options={"xatol": 1e-9, "fatol": 1e-12, "maxiter": 6000, "maxfev": 12000})
        if best is None or res.fun < best.fun:
            best = res
    rho, c = _unpack(best.x, k)
    val, rb1, rb2 = contraction_bound(k, rho1, rho2, rho, c, T)
    return val, rho, c or default, rb1, rb2


def remark61_theta(rho1: float, k1: float, k4: float, k5: float, k6: float, k9: float, k10: float,
                   epsilon: float):
    """theta and the four explicit conditions; returns (theta, [(name, margin)])."""
    eps = float(epsilon)
    if eps <= 0:
        raise InvalidArgument("epsilon must be positive")
    gap = -(4 * rho1 + 4 * k5 ** 2 + 3 * eps)
    if gap > 0:
        theta = ((2 / gap + 5 + (2 * k5 ** 2 + 2 * k6 ** 2) / eps)
                 * (2 * k9 ** 2 + 2 * k4 ** 2 / (eps * gap)))
    else:
        theta = math.inf
    conds = [
        ("4 rho1 < -4 k5^2 - 3 eps", gap),
        ("k9^2 theta < 1", 1 - k9 ** 2 * theta if k9 else 1.0),
        ("k10^2 theta < 1", 1 - k10 ** 2 * theta if k10 else 1.0),
        ("k1^2 theta / eps < 1", 1 - k1 ** 2 * theta / eps if k1 else 1.0),
    ]
    return theta, conds


def certify(target, variant: str = "general", epsilon: float = 1.0,
            grid: Optional[TimeGrid] = None, constants: Optional[Dict[str, float]] = None
            ) -> WellposednessCertificate:
    """Wellposedness certificate.

    ``target`` is a :class:`BfsdeSystem` for ``general`` and game coefficients
    for ``bfsde2``/``follower``. For ``remark61`` it may be either, or
    ``None`` with explicit ``constants`` (rho1, k1, k4, k5, k6, k9, k10).
    """
    if variant not in ("general", "bfsde2", "follower", "remark61"):
        raise InvalidArgument(f"unknown certificate variant {variant!r}")
    if constants is not None:
        k = dict.fromkeys(KEYS, 0.0)
        k.update({key: float(v) for key, v in constants.items()})
        k.setdefault("rho2", k.get("rho1", 0.0))
        T = grid.T if grid is not None else float(constants.get("T", 1.0))
    elif isinstance(target, BfsdeSystem):
        if grid is None:
            raise InvalidArgument("a grid is needed to evaluate system coefficients")
        k = system_constants(target, grid)
        T = grid.T
    else:
        grid = grid or target.grid
        k = game_constants(target, "follower" if variant == "follower" else "bfsde2", grid)
        T = grid.T
    rho1, rho2 = k.pop("rho1", 0.0), k.pop("rho2", 0.0)
    normC = k.pop("normC", None)
    kk = {key: float(k.get(key, 0.0)) for key in KEYS}

    log = []
    if variant == "remark61":
        theta, conds = remark61_theta(rho1, kk["k1"], kk["k4"], kk["k5"], kk["k6"], kk["k9"],
                                      kk["k10"], epsilon)
        log = [{"name": n, "margin": m, "kind": "explicit"} for n, m in conds]
        factor = max(kk["k9"] ** 2 * theta, kk["k10"] ** 2 * theta, kk["k1"] ** 2 * theta / epsilon)
        passed = all(e["margin"] > 0 for e in log)
        return WellposednessCertificate(variant, rho1, rho2, kk, math.nan, math.nan, math.nan, {},
                                        factor, theta, "pass" if passed else "fail", tuple(log),
                                        float(epsilon))

    val, rho, c, rb1, rb2 = optimise_contraction(kk, rho1, rho2, T)
    factor = math.sqrt(val) if np.isfinite(val) else math.inf
    log.append({"name": "1 - k5 c5 - k6 c6 > 0",
                "margin": 1 - kk["k5"] * c["c5"] - kk["k6"] * c["c6"], "kind": "explicit"})
    log.append({"name": "1 - k4 c4 > 0", "margin": 1 - kk["k4"] * c["c4"], "kind": "explicit"})
    log.append({"name": "contraction factor < 1", "margin": 1 - factor, "kind": "explicit"})
    if variant == "general":
        log.append({"name": "2(rho1 + rho2) < -2 k5^2 - 2 k6^2 - k7^2",
                    "margin": -2 * kk["k5"] ** 2 - 2 * kk["k6"] ** 2 - kk["k7"] ** 2 - 2 * (rho1 + rho2),
                    "kind": "qualitative"})
    else:
        mult = 4.0 if variant == "bfsde2" else 2.0
        # a stated hypothesis of the game-level results, so it gates the verdict
        log.append({"name": f"rho* < -{mult:g} ||C||^2", "margin": -mult * normC ** 2 - rho1,
                    "kind": "explicit"})
    passed = all(e["margin"] > 0 for e in log if e["kind"] == "explicit")
    return WellposednessCertificate(variant, rho1, rho2, kk, rho, rb1, rb2, c, factor, math.nan,
                                    "pass" if passed else "fail", tuple(log), None)
