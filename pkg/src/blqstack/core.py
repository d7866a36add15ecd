"""Time grids, coefficient and state paths, fixed-step ODE integration,
transition matrices and Brownian scenario ensembles."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Optional

import numpy as np

from .errors import InvalidArgument, NumericalBlowup

Array = np.ndarray


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition ``0 = t_0 < ... < t_N = T``."""

    T: float
    N: int

    def __post_init__(self):
        if not np.isfinite(self.T) or self.T <= 0:
            raise InvalidArgument(f"horizon must be positive, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise InvalidArgument(f"step count must be a positive integer, got {self.N}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @cached_property
    def nodes(self) -> Array:
        nodes = np.arange(self.N + 1) * self.dt
        nodes[-1] = self.T
        return nodes

    def refine(self, factor: int = 2) -> "TimeGrid":
        return TimeGrid(self.T, self.N * factor)


def build_grid(T: float, N: int) -> TimeGrid:
    return TimeGrid(float(T), N)


@dataclass(frozen=True, eq=False)
class MatrixPath:
    """Matrix-valued function of time sampled at the grid nodes.

    Off-node values come from ``fn`` when one was supplied and from linear
    interpolation of the nodes otherwise.
    """

    grid: TimeGrid
    values: Array
    fn: Optional[Callable[[float], Array]] = field(default=None, repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None, None]
        elif values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3 or values.shape[0] != self.grid.N + 1:
            raise InvalidArgument(
                f"expected {self.grid.N + 1} node values, got array of shape {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def constant(cls, grid: TimeGrid, value) -> "MatrixPath":
        value = np.atleast_2d(np.asarray(value, dtype=float))
        return cls(grid, np.broadcast_to(value, (grid.N + 1,) + value.shape).copy(),
                   fn=lambda t, v=value: v)

    @classmethod
    def from_function(cls, grid: TimeGrid, fn: Callable[[float], Array]) -> "MatrixPath":
        def wrapped(t):
            return np.atleast_2d(np.asarray(fn(t), dtype=float))
        return cls(grid, np.stack([wrapped(t) for t in grid.nodes]), fn=wrapped)

    @property
    def shape(self) -> tuple:
        return self.values.shape[1:]

    def __getitem__(self, k: int) -> Array:
        return self.values[k]

    def __len__(self) -> int:
        return self.values.shape[0]

    def at(self, t: float) -> Array:
        if self.fn is not None:
            return self.fn(t)
        grid = self.grid
        s = min(max(t / grid.dt, 0.0), float(grid.N))
        k = min(int(np.floor(s)), grid.N - 1)
        w = s - k
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    def transpose(self) -> "MatrixPath":
        fn = None if self.fn is None else (lambda t, f=self.fn: f(t).T)
        return MatrixPath(self.grid, np.swapaxes(self.values, 1, 2), fn=fn)

    def sup_norm(self) -> float:
        """Largest Frobenius norm over the nodes."""
        return float(np.max(np.linalg.norm(self.values, axis=(1, 2))))

    def is_constant(self, tol: float = 0.0) -> bool:
        return bool(np.max(np.abs(self.values - self.values[0])) <= tol)


@dataclass(frozen=True, eq=False)
class VectorPath:
    """Per-scenario vector paths, shape ``(M, N+1, n)``; ``M = 1`` when deterministic."""

    grid: TimeGrid
    values: Array

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[None, :, None]
        elif values.ndim == 2:
            values = values[None, :, :]
        if values.ndim != 3 or values.shape[1] != self.grid.N + 1:
            raise InvalidArgument(
                f"expected (M, {self.grid.N + 1}, n) values, got shape {values.shape}")
        object.__setattr__(self, "values", values)

    @classmethod
    def zeros(cls, grid: TimeGrid, dim: int, paths: int = 1) -> "VectorPath":
        return cls(grid, np.zeros((paths, grid.N + 1, dim)))

    @classmethod
    def constant(cls, grid: TimeGrid, value, paths: int = 1) -> "VectorPath":
        value = np.atleast_1d(np.asarray(value, dtype=float))
        return cls(grid, np.broadcast_to(value, (paths, grid.N + 1, value.size)).copy())

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[2]

    @property
    def is_deterministic(self) -> bool:
        return self.n_paths == 1

    def mean(self) -> Array:
        return self.values.mean(axis=0)

    def std(self) -> Array:
        if self.n_paths == 1:
            return np.zeros(self.values.shape[1:])
        return self.values.std(axis=0, ddof=1)

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values))) if self.values.size else 0.0

    def node(self, k: int) -> Array:
        """Scenario values at node k, shape ``(M, n)``."""
        return self.values[:, k, :]


@dataclass(frozen=True, eq=False)
class ScenarioEnsemble:
    grid: TimeGrid
    increments: Array
    seed: Optional[int] = None
    antithetic: bool = False

    def __post_init__(self):
        inc = np.asarray(self.increments, dtype=float)
        if inc.ndim != 2 or inc.shape[1] != self.grid.N:
            raise InvalidArgument(f"increments must have shape (M, {self.grid.N})")
        inc.setflags(write=False)
        object.__setattr__(self, "increments", inc)

    @property
    def n_paths(self) -> int:
        return self.increments.shape[0]

    @cached_property
    def W(self) -> Array:
        """Brownian paths at the nodes, shape ``(M, N+1)``."""
        W = np.zeros((self.n_paths, self.grid.N + 1))
        np.cumsum(self.increments, axis=1, out=W[:, 1:])
        return W

    def coarsen(self, factor: int = 2) -> "ScenarioEnsemble":
        """The same Brownian paths observed on every ``factor``-th node."""
        if factor < 1 or self.grid.N % factor:
            raise InvalidArgument(f"cannot coarsen {self.grid.N} steps by {factor}")
        inc = self.increments.reshape(self.n_paths, -1, factor).sum(axis=2)
        return ScenarioEnsemble(TimeGrid(self.grid.T, self.grid.N // factor), inc, self.seed,
                                self.antithetic)

    def subset(self, idx) -> "ScenarioEnsemble":
        return ScenarioEnsemble(self.grid, self.increments[idx], self.seed, self.antithetic)

    @classmethod
    def deterministic(cls, grid: TimeGrid) -> "ScenarioEnsemble":
        """One scenario with zero noise; used to run scenario code on deterministic data."""
        return cls(grid, np.zeros((1, grid.N)), seed=None)


def sample_ensemble(grid: TimeGrid, M: int, seed: int, antithetic: bool = False) -> ScenarioEnsemble:
    if M < 1:
        raise InvalidArgument("need at least one scenario")
    rng = np.random.default_rng(seed)
    sd = np.sqrt(grid.dt)
    if antithetic:
        half = (M + 1) // 2
        base = rng.standard_normal((half, grid.N)) * sd
        inc = np.concatenate([base, -base])[:M]
    else:
        inc = rng.standard_normal((M, grid.N)) * sd
    return ScenarioEnsemble(grid, inc, seed=seed, antithetic=antithetic)


def _check_finite(x: Array, t: float):
    if not np.all(np.isfinite(x)):
        raise NumericalBlowup(f"non-finite value at t={t:.6g}", time=float(t))


def integrate_ode(rhs: Callable[[float, Array], Array], boundary, grid: TimeGrid,
                  direction: str = "backward",
                  post_step: Optional[Callable[[int, Array], Array]] = None) -> Array:
    """Classical RK4 on the grid.

    ``boundary`` is the value at t=0 (forward) or t=T (backward). Returns the
    node values stacked along axis 0. ``post_step(k, x)`` may adjust the value
    at node k (used for symmetrisation).
    """
    if direction not in ("forward", "backward"):
        raise InvalidArgument(f"direction must be forward or backward, got {direction!r}")
    x0 = np.asarray(boundary, dtype=float)
    out = np.empty((grid.N + 1,) + x0.shape)
    t, dt = grid.nodes, grid.dt
    if direction == "forward":
        out[0] = x0
        order = range(grid.N)
        h = dt
    else:
        out[-1] = x0
        order = range(grid.N, 0, -1)
        h = -dt
    for k in order:
        x, tk = out[k], t[k]
        k1 = rhs(tk, x)
        k2 = rhs(tk + h / 2, x + h / 2 * k1)
        k3 = rhs(tk + h / 2, x + h / 2 * k2)
        k4 = rhs(tk + h, x + h * k3)
        nxt = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        j = k + 1 if h > 0 else k - 1
        _check_finite(nxt, t[j])
        if post_step is not None:
            nxt = post_step(j, nxt)
        out[j] = nxt
    return out


def as_coefficient(A) -> Callable[[float], Array]:
    if isinstance(A, MatrixPath):
        return A.at
    if callable(A):
        return A
    A = np.atleast_2d(np.asarray(A, dtype=float))
    return lambda t: A


def integrate_linear_ode(A, boundary, grid: TimeGrid, direction: str = "backward",
                         forcing=None) -> MatrixPath:
    """Integrate ``x' = A(t) x + b(t)``; ``x`` may be a vector or a matrix."""
    Af = as_coefficient(A)
    bf = None if forcing is None else as_coefficient(forcing)
    boundary = np.asarray(boundary, dtype=float)
    vector = boundary.ndim == 1
    x0 = boundary[:, None] if vector else boundary

    def rhs(t, x):
        dx = Af(t) @ x
        return dx if bf is None else dx + np.reshape(bf(t), dx.shape)

    return MatrixPath(grid, integrate_ode(rhs, x0, grid, direction))


@dataclass(frozen=True, eq=False)
class TransitionFamily:
    """Ψ(t_k, t_j) = Φ(t_k) Φ(t_j)⁻¹ with Φ' = Â Φ, Φ(0) = I."""

    grid: TimeGrid
    phi: Array

    def __call__(self, k: int, j: int) -> Array:
        if k == j:
            return np.eye(self.phi.shape[1])
        return np.linalg.solve(self.phi[j].T, self.phi[k].T).T


def fundamental_matrix(A_hat, grid: TimeGrid) -> TransitionFamily:
    Af = as_coefficient(A_hat)
    n = Af(0.0).shape[0]
    if Af(0.0).shape != (n, n):
        raise InvalidArgument("generator must be square")
    phi = integrate_ode(lambda t, X: Af(t) @ X, np.eye(n), grid, "forward")
    return TransitionFamily(grid, phi)


def time_integral(values: Array, grid: TimeGrid) -> Array:
    """Quadrature along axis 0 of node values: composite Simpson when N is
    even, trapezoid otherwise."""
    values = np.asarray(values, dtype=float)
    dt = grid.dt
    if grid.N % 2 == 0:
        w = np.ones(grid.N + 1)
        w[1:-1:2] = 4.0
        w[2:-1:2] = 2.0
        w *= dt / 3.0
    else:
        w = np.full(grid.N + 1, dt)
        w[0] = w[-1] = dt / 2
    return np.tensordot(w, values, axes=(0, 0))
