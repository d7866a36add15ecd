"""Deterministic-coefficient Riccati equations of the game.

Every equation here is integrated backward with RK4 from its terminal value.
Martingale parts are identically zero because coefficients are deterministic.
Coefficient objects only need a ``snapshot(t)`` method (see
:class:`blqstack.follower.GameCoefficients`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np
from scipy.linalg import block_diag

from .core import MatrixPath, TimeGrid, fundamental_matrix, integrate_ode
from .errors import ConstraintViolation, InvalidArgument, NumericalBlowup, RepresentationFailure

POS_TOL = 1e-10
C_ZERO_TOL = 1e-14


@dataclass(frozen=True, eq=False)
class RiccatiSolution:
    P: MatrixPath
    residual_sup: float
    positivity_log: np.ndarray
    kind: str = ""
    extras: Dict[str, object] = field(default_factory=dict)

    def at_node(self, k: int) -> np.ndarray:
        return self.P.values[k]

    @property
    def P0(self) -> np.ndarray:
        return self.P.values[0]


def _sym(X):
    return 0.5 * (X + X.T)


def hermite_path(grid: TimeGrid, values: np.ndarray, derivs: np.ndarray) -> MatrixPath:
    """Node values with a cubic Hermite interpolant for off-node evaluation."""
    values = np.asarray(values, dtype=float)
    derivs = np.asarray(derivs, dtype=float)
    dt, N = grid.dt, grid.N

    def fn(t):
        s = min(max(t / dt, 0.0), float(N))
        k = min(int(np.floor(s)), N - 1)
        w = s - k
        h00 = 2 * w**3 - 3 * w**2 + 1
        h10 = w**3 - 2 * w**2 + w
        h01 = -2 * w**3 + 3 * w**2
        h11 = w**3 - w**2
        return (h00 * values[k] + h10 * dt * derivs[k]
                + h01 * values[k + 1] + h11 * dt * derivs[k + 1])

    shaped = values if values.ndim == 3 else values.reshape(values.shape[0], -1, 1)
    path = MatrixPath(grid, shaped)
    if values.ndim == 3:
        object.__setattr__(path, "fn", fn)
    else:
        object.__setattr__(path, "fn", lambda t: fn(t).reshape(-1, 1))
    return path


def residual_sup(rhs: Callable, values: np.ndarray, grid: TimeGrid) -> float:
    """Sup-norm mismatch between the discrete slope and the Simpson average of
    the right-hand side, with midpoints from cubic Hermite interpolation."""
    t, dt = grid.nodes, grid.dt
    f = np.stack([rhs(tk, values[k]) for k, tk in enumerate(t)])
    worst = 0.0
    for k in range(grid.N):
        mid = 0.5 * (values[k] + values[k + 1]) + dt / 8 * (f[k] - f[k + 1])
        fm = rhs(t[k] + dt / 2, mid)
        r = (values[k + 1] - values[k]) / dt - (f[k] + 4 * fm + f[k + 1]) / 6
        worst = max(worst, float(np.max(np.abs(r))))
    return worst


def _backward(rhs, terminal, grid, symmetric: bool, check=None):
    """Integrate backward; ``check(t, P)`` returns a logged margin and raises on failure."""
    log = np.empty(grid.N + 1)
    nodes = grid.nodes
    if check is not None:
        log[-1] = check(nodes[-1], terminal)

    def post(j, X):
        if symmetric:
            X = _sym(X)
        if check is not None:
            log[j] = check(nodes[j], X)
        return X

    values = integrate_ode(rhs, terminal, grid, "backward", post_step=post)
    if check is None:
        log[:] = np.nan
    return values, log


def _as_path(grid, values, rhs) -> MatrixPath:
    derivs = np.stack([rhs(t, values[k]) for k, t in enumerate(grid.nodes)])
    return hermite_path(grid, values, derivs)


# ---------------------------------------------------------------------------
# follower Riccati equation


def sre1_rhs(coeffs) -> Callable:
    def rhs(t, P):
        c = coeffs.snapshot(t)
        PC = P @ c.C
        val = c.Q2 + P @ c.A + c.A.T @ P - P @ c.N2 @ P
        if np.any(c.C):
            val = val - PC @ np.linalg.solve(P + c.S2, PC.T)
        return -val
    return rhs


def solve_sre1(coeffs, M=None, grid: Optional[TimeGrid] = None) -> RiccatiSolution:
    """Follower Riccati equation with terminal value ``M`` (identity by default).

    Requires ``P + S2`` positive definite at every node.
    """
    grid = grid or coeffs.grid
    n = coeffs.n
    M = np.eye(n) if M is None else np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape != (n, n) or not np.allclose(M, M.T, atol=1e-12):
        raise InvalidArgument("terminal value must be a symmetric n x n matrix")

    def check(t, P):
        m = float(np.linalg.eigvalsh(_sym(P + coeffs.snapshot(t).S2)).min())
        if m < POS_TOL:
            raise ConstraintViolation(f"P + S2 loses positive definiteness at t={t:.6g}",
                                      time=float(t), min_eig=m)
        return m

    rhs = sre1_rhs(coeffs)
    values, log = _backward(rhs, _sym(M), grid, True, check)
    return RiccatiSolution(_as_path(grid, values, rhs), residual_sup(rhs, values, grid), log,
                           kind="sre1")


def inverse_bounds(coeffs, M: float, grid: TimeGrid) -> tuple:
    """Upper and lower bounds on y = 1/P from comparison with linear equations."""
    snaps = [coeffs.snapshot(t) for t in grid.nodes]
    a_up = max(abs(float(c.C[0, 0] ** 2 - 2 * c.A[0, 0])) for c in snaps)
    # with S2 > 0 the damping term can drop to -2A, so the lower bound uses both rates
    a_lo = max(max(abs(float(c.C[0, 0] ** 2 - 2 * c.A[0, 0])), abs(2 * float(c.A[0, 0])))
               for c in snaps)
    b = max(abs(float(c.N2[0, 0])) for c in snaps)
    q = max(float(c.Q2[0, 0]) for c in snaps)
    T = grid.T
    c1 = (1.0 / M) * np.exp(a_up * T) + b * T * np.exp(a_up * T)
    c2 = (1.0 / M) * np.exp(-2 * a_lo * T - c1 * q * T)
    return c1, c2


def scalar_sre1_via_inverse(coeffs, M: float = 1.0, grid: Optional[TimeGrid] = None) -> RiccatiSolution:
    """Scalar follower Riccati equation solved through y = 1/P.

    y' = Q2 y^2 + 2 A y - B2^2/R22 - C^2 y / (1 + S2 y),  y(T) = 1/M.
    """
    grid = grid or coeffs.grid
    if (coeffs.n, coeffs.m1, coeffs.m2) != (1, 1, 1):
        raise InvalidArgument("inverse substitution is scalar only")
    M = float(np.asarray(M).reshape(()))
    if M <= 0:
        raise InvalidArgument("terminal value must be positive")
    for t in grid.nodes:
        c = coeffs.snapshot(t)
        if c.S2[0, 0] < 0 or c.Q2[0, 0] < 0:
            raise InvalidArgument("inverse substitution needs S2 >= 0 and Q2 >= 0")

    def rhs(t, y):
        c = coeffs.snapshot(t)
        A, C, q, s, b = c.A[0, 0], c.C[0, 0], c.Q2[0, 0], c.S2[0, 0], c.N2[0, 0]
        return q * y * y + 2 * A * y - b - C * C * y / (1.0 + s * y)

    def check(t, y):
        v = float(np.asarray(y).reshape(()))
        if v <= 0:
            raise NumericalBlowup(f"y touched zero at t={t:.6g}", time=float(t))
        return v

    y_vals, log = _backward(rhs, np.array([[1.0 / M]]), grid, False, check)
    c1, c2 = inverse_bounds(coeffs, M, grid)
    y = y_vals[:, 0, 0]
    slack = 1e-9 * max(1.0, c1)
    within = bool(np.all(y <= c1 + slack) and np.all(y >= c2 - slack))
    if not within:
        raise NumericalBlowup("inverse solution left its a priori bounds",
                              c1=c1, c2=c2, y_min=float(y.min()), y_max=float(y.max()))
    P_vals = 1.0 / y_vals
    prhs = sre1_rhs(coeffs)
    return RiccatiSolution(_as_path(grid, P_vals, prhs), residual_sup(rhs, y_vals, grid), log,
                           kind="sre1-inverse",
                           extras={"y": y, "c1": c1, "c2": c2, "bounds_hold": within})


# ---------------------------------------------------------------------------
# leader Riccati equation


@dataclass(frozen=True)
class Sre2Blocks:
    AA: np.ndarray
    BB: np.ndarray
    CC: np.ndarray
    DD: np.ndarray
    QQ: np.ndarray
    RR: np.ndarray


def sre2_blocks(c) -> Sre2Blocks:
    n, m1 = c.n, c.m1
    Z = np.zeros((n, n))
    I = np.eye(n)
    AA = np.block([[-c.A.T, c.Q2], [c.N2, c.A]])
    BB = np.block([[np.zeros((n, m1)), Z], [c.B1, c.C]])
    CC = np.block([[-c.C.T, Z], [Z, Z]])
    DD = np.block([[np.zeros((n, m1)), c.S2], [np.zeros((n, m1)), I]])
    QQ = block_diag(Z, c.Q1)
    RR = block_diag(c.R11, c.S1)
    return Sre2Blocks(AA, BB, CC, DD, QQ, RR)


def solve_sre2(coeffs, grid: Optional[TimeGrid] = None) -> RiccatiSolution:
    grid = grid or coeffs.grid
    n = coeffs.n

    def parts(t, P):
        b = sre2_blocks(coeffs.snapshot(t))
        K = b.RR + b.DD.T @ P @ b.DD
        L = b.BB.T @ P + b.DD.T @ P @ b.CC
        return b, K, L

    def rhs(t, P):
        b, K, L = parts(t, P)
        return -(b.AA.T @ P + P @ b.AA + b.CC.T @ P @ b.CC + b.QQ - L.T @ np.linalg.solve(K, L))

    def check(t, P):
        _, K, _ = parts(t, P)
        m = float(np.linalg.eigvalsh(_sym(K)).min())
        if m < POS_TOL:
            raise ConstraintViolation(f"K loses positive definiteness at t={t:.6g}",
                                      time=float(t), min_eig=m)
        return m

    terminal = block_diag(np.zeros((n, n)), coeffs.G1)
    values, log = _backward(rhs, terminal, grid, True, check)
    return RiccatiSolution(_as_path(grid, values, rhs), residual_sup(rhs, values, grid), log,
                           kind="sre2")


@dataclass(frozen=True)
class Certificate:
    ok: bool
    margin: float

    def __bool__(self):
        return self.ok


def leader_convexity_certificate(sre2: RiccatiSolution, H1) -> Certificate:
    H1 = np.atleast_2d(np.asarray(H1, dtype=float))
    n = H1.shape[0]
    m = float(np.linalg.eigvalsh(_sym(block_diag(np.zeros((n, n)), H1) + sre2.P0)).min())
    return Certificate(m >= -1e-10, m)


def follower_convexity_certificate(sre1: RiccatiSolution, H2) -> Certificate:
    H2 = np.atleast_2d(np.asarray(H2, dtype=float))
    m = float(np.linalg.eigvalsh(_sym(H2 + sre1.P0)).min())
    return Certificate(m >= -1e-10, m)


# ---------------------------------------------------------------------------
# decoupling of the zero-multiplier system


def _time_invariant(coeffs) -> bool:
    paths = [getattr(coeffs, name, None) for name in ("A", "B1", "B2", "C", "Q1", "Q2", "S1",
                                                       "S2", "R11", "R22")]
    if any(p is None or not isinstance(p, MatrixPath) for p in paths):
        return False
    mid = 0.5 * coeffs.grid.dt
    return all(p.is_constant() and np.array_equal(p.at(mid), p.values[0]) for p in paths)


def _block_fn(coeffs, build) -> Callable[[float], Dict[str, np.ndarray]]:
    """Blocks as a function of time; built once when no coefficient varies."""
    if _time_invariant(coeffs):
        blocks = build(coeffs.snapshot(0.0))
        return lambda t: blocks
    return lambda t: build(coeffs.snapshot(t))


@dataclass(frozen=True, eq=False)
class TildeBlocks:
    """Blocks of the transformed zero-multiplier system as functions of time."""

    grid: TimeGrid
    fn: Callable[[float], Dict[str, np.ndarray]]
    G_tilde: np.ndarray
    HH: np.ndarray
    _cache: Dict[float, Dict[str, np.ndarray]] = field(default_factory=dict, repr=False)

    def at(self, t: float) -> Dict[str, np.ndarray]:
        key = float(t)
        blocks = self._cache.get(key)
        if blocks is None:
            blocks = self._cache[key] = self.fn(key)
        return blocks

    def c_is_zero(self) -> bool:
        return all(np.max(np.abs(self.at(t)["C_hat"])) < C_ZERO_TOL for t in self.grid.nodes)


def tilde_blocks_at(c) -> Dict[str, np.ndarray]:
    A, C, H1, H2, N1, N2 = c.A, c.C, c.H1, c.H2, c.N1, c.N2
    At = A.T
    Z = np.zeros_like(A)
    A_t = np.block([[At + H1 @ N1 + H2 @ N2, H1 @ N2],
                    [H2 @ N1, At + H2 @ N2]])
    B11 = -c.Q1 + H1 @ A + At @ H1 + H1 @ N1 @ H1 + H2 @ N2 @ H1 + H1 @ N2 @ H2
    B12 = -c.Q2 + H2 @ A + At @ H2 + H1 @ N1 @ H2 + H2 @ N2 @ H2
    B21 = -c.Q2 + H2 @ A + At @ H2 + H2 @ N1 @ H1 + H2 @ N2 @ H2
    B22 = H2 @ N1 @ H2
    return {
        "A_tilde": A_t,
        "B_tilde": np.block([[B11, B12], [B21, B22]]),
        "C_tilde": np.block([[H1 @ C, H2 @ C], [H2 @ C, Z]]),
        "A1_tilde": block_diag(C, C).T,
        "B1_tilde": np.block([[C.T @ H1, C.T @ H2], [C.T @ H2, Z]]),
        "C1_tilde": -np.block([[c.S1 - H1, c.S2 - H2], [c.S2 - H2, Z]]),
        "A_hat": np.block([[N1, N2], [N2, Z]]),
        "B_hat": np.block([[A + N1 @ H1 + N2 @ H2, N1 @ H2],
                           [N2 @ H1, A + N2 @ H2]]),
        "C_hat": block_diag(C, C),
    }


def assemble_tilde_blocks(coeffs, grid: Optional[TimeGrid] = None) -> TildeBlocks:
    grid = grid or coeffs.grid
    n = coeffs.n
    G1inv = np.linalg.inv(coeffs.G1)
    M = np.eye(n) + G1inv @ coeffs.H1
    if abs(np.linalg.det(M)) < POS_TOL:
        raise InvalidArgument("I + G1^{-1} H1 is singular")
    G_tilde = -block_diag(np.linalg.solve(M, G1inv), np.zeros((n, n)))
    HH = np.block([[coeffs.H1, coeffs.H2], [coeffs.H2, np.zeros((n, n))]])
    return TildeBlocks(grid, _block_fn(coeffs, tilde_blocks_at), G_tilde, HH)


def tilde_rhs(blocks: TildeBlocks, general: bool) -> Callable:
    def rhs(t, P):
        b = blocks.at(t)
        val = b["A_hat"] + b["B_hat"] @ P + P @ b["A_tilde"] + P @ b["B_tilde"] @ P
        if general:
            I = np.eye(P.shape[0])
            inner = -P @ (b["A1_tilde"] + b["B1_tilde"] @ P)
            val = val + (b["C_hat"] + P @ b["C_tilde"]) @ np.linalg.solve(I + P @ b["C1_tilde"], inner)
        return val
    return rhs


def solve_decoupling_tilde(blocks: TildeBlocks, grid: Optional[TimeGrid] = None) -> RiccatiSolution:
    grid = grid or blocks.grid
    general = not blocks.c_is_zero()
    check = None
    if general:
        def check(t, P):
            d = float(np.linalg.det(np.eye(P.shape[0]) + P @ blocks.at(t)["C1_tilde"]))
            if abs(d) < POS_TOL:
                raise RepresentationFailure(f"I + P C1 singular at t={t:.6g}", time=float(t))
            return d
    rhs = tilde_rhs(blocks, general)
    values, log = _backward(rhs, blocks.G_tilde, grid, True, check)
    # the linear equation for p has zero terminal value and no forcing, so p vanishes
    p = np.zeros((grid.N + 1, values.shape[1], 1))
    return RiccatiSolution(_as_path(grid, values, rhs), residual_sup(rhs, values, grid), log,
                           kind="tilde-general" if general else "tilde",
                           extras={"p": MatrixPath(grid, p)})


def riccati_closed_form(generator: Callable[[float], np.ndarray], G: np.ndarray,
                        grid: TimeGrid) -> np.ndarray:
    """Solve P' = a + b P + P c + P d P with P(T) = G through the linear flow.

    ``generator(t)`` is the block matrix [[-c, -d], [a, b]]. Along its flow
    the graph y = P x is invariant, so with Ψ = Ψ(T, t)
    P(t) = -[(-G I) Ψ (0; I)]^{-1} (-G I) Ψ (I; 0).
    """
    fam = fundamental_matrix(generator, grid)
    m = G.shape[0]
    k = fam.phi.shape[1] - m
    left = np.hstack([-G, np.eye(m)])
    out = np.empty((grid.N + 1, m, k))
    for j in range(grid.N + 1):
        psi = fam(grid.N, j)
        lower = left @ psi[:, k:]
        scale = np.linalg.norm(left, 2) * np.linalg.norm(psi[:, k:], 2)
        if np.linalg.svd(lower, compute_uv=False).min() <= 1e-12 * scale:
            raise RepresentationFailure(
                f"transition block not invertible at t={grid.nodes[j]:.6g}", time=float(grid.nodes[j]))
        out[j] = -np.linalg.solve(lower, left @ psi[:, :k])
    return out


def tilde_closed_form(blocks: TildeBlocks, grid: Optional[TimeGrid] = None) -> np.ndarray:
    grid = grid or blocks.grid
    if not blocks.c_is_zero():
        raise InvalidArgument("closed form requires C = 0")

    def gen(t):
        b = blocks.at(t)
        return np.block([[-b["B_hat"].T, -b["B_tilde"]], [b["A_hat"], b["B_hat"]]])

    return riccati_closed_form(gen, blocks.G_tilde, grid)


# ---------------------------------------------------------------------------
# decoupling of the positive-multiplier system


@dataclass(frozen=True, eq=False)
class CheckBlocks:
    grid: TimeGrid
    fn: Callable[[float], Dict[str, np.ndarray]]
    H_check: np.ndarray
    G_check: np.ndarray
    f_check: np.ndarray
    n: int
    _cache: Dict[float, Dict[str, np.ndarray]] = field(default_factory=dict, repr=False)

    def at(self, t: float) -> Dict[str, np.ndarray]:
        key = float(t)
        blocks = self._cache.get(key)
        if blocks is None:
            blocks = self._cache[key] = self.fn(key)
        return blocks

    def c_is_zero(self) -> bool:
        return all(np.max(np.abs(self.at(t)["C2"])) < C_ZERO_TOL for t in self.grid.nodes)

    @property
    def P_terminal(self) -> np.ndarray:
        I = np.eye(4 * self.n)
        return np.linalg.solve(I - self.G_check @ self.H_check, self.G_check)

    @property
    def p_terminal(self) -> np.ndarray:
        I = np.eye(4 * self.n)
        return np.linalg.solve(I - self.G_check @ self.H_check, self.f_check)


def check_blocks_at(c, H) -> Dict[str, np.ndarray]:
    A, C, N1, N2 = c.A, c.C, c.N1, c.N2
    Z = np.zeros_like(A)
    At, Ct = A.T, C.T
    blocks = {
        "A": block_diag(At, At, At, At),
        "B": np.block([[-c.Q1, Z, -c.Q2, Z], [Z, -c.Q1, Z, -c.Q2],
                       [-c.Q2, Z, Z, Z], [Z, -c.Q2, Z, Z]]),
        "A1": np.block([[Z, Z, Z, Z], [Ct, Ct, Z, Z], [Z, Z, Z, Z], [Z, Z, Ct, Ct]]),
        "B1": np.block([[Z, Z, Z, Z], [Z, -c.S1, Z, -c.S2], [Z, Z, Z, Z], [Z, -c.S2, Z, Z]]),
        "A2": np.block([[N1, Z, N2, Z], [Z, N1, Z, N2], [N2, Z, Z, Z], [Z, N2, Z, Z]]),
        "B2": block_diag(A, A, A, A),
        "C2": block_diag(Z, C, Z, C),
        "D2": np.block([[Z, C, Z, Z], [Z, -C, Z, Z], [Z, Z, Z, C], [Z, Z, Z, -C]]),
    }
    b = blocks
    blocks.update({
        "A_bar": b["A"] + H @ b["A2"],
        "B_bar": b["A"] @ H + b["B"] + H @ b["A2"] @ H + H @ b["B2"],
        "C_bar": H @ b["C2"],
        "D_bar": H @ b["D2"],
        "A1_bar": b["A1"],
        "B1_bar": b["A1"] @ H,
        "C1_bar": b["B1"] + H,
        "A2_bar": b["A2"],
        "B2_bar": b["A2"] @ H + b["B2"],
        "C2_bar": b["C2"],
        "D2_bar": b["D2"],
    })
    return blocks


def assemble_check_blocks(coeffs, alpha, beta: float, grid: Optional[TimeGrid] = None) -> CheckBlocks:
    grid = grid or coeffs.grid
    n = coeffs.n
    alpha = np.asarray(alpha, dtype=float).reshape(n)
    G1inv = np.linalg.inv(coeffs.G1)
    w = float(alpha @ G1inv @ alpha)
    if w <= 0:
        raise InvalidArgument("<alpha, G1^{-1} alpha> must be positive")
    proj = G1inv @ np.outer(alpha, alpha) @ G1inv / w
    I = np.eye(n)
    if abs(np.linalg.det(I + (G1inv - proj) @ coeffs.H1)) < POS_TOL:
        raise InvalidArgument("I + (G1^{-1} - G1^{-1} a a' G1^{-1} / <a, G1^{-1} a>) H1 is singular")
    if abs(np.linalg.det(I + G1inv @ coeffs.H1)) < POS_TOL:
        raise InvalidArgument("I + G1^{-1} H1 is singular")
    Zn = np.zeros((n, n))
    H1, H2 = coeffs.H1, coeffs.H2
    H = np.block([[H1, Zn, H2, Zn], [Zn, H1, Zn, H2], [H2, Zn, Zn, Zn], [Zn, H2, Zn, Zn]])
    G = block_diag(-G1inv + proj, -G1inv, Zn, Zn)
    f = np.concatenate([G1inv @ alpha * beta / w, np.zeros(3 * n)])[:, None]
    return CheckBlocks(grid, _block_fn(coeffs, lambda c: check_blocks_at(c, H)), H, G, f, n)


def _check_gain(b, P):
    I = np.eye(P.shape[0])
    lead = P @ b["C_bar"] + P @ b["D_bar"] + b["C2_bar"] + b["D2_bar"]
    return lead, I + P @ b["C1_bar"]


def check_rhs(blocks: CheckBlocks, general: bool) -> Callable:
    def rhs(t, P):
        b = blocks.at(t)
        val = P @ b["A_bar"] + P @ b["B_bar"] @ P + b["A2_bar"] + b["B2_bar"] @ P
        if general:
            lead, M = _check_gain(b, P)
            val = val - lead @ np.linalg.solve(M, P @ b["A1_bar"] + P @ b["B1_bar"] @ P)
        return val
    return rhs


@dataclass(frozen=True, eq=False)
class CheckSolution:
    riccati: RiccatiSolution
    p: MatrixPath
    mean_Ybar: np.ndarray
    mean_Y_T: np.ndarray
    mean_X_T: np.ndarray


def solve_decoupling_check(blocks: CheckBlocks, grid: Optional[TimeGrid] = None) -> CheckSolution:
    """Asymmetric Riccati equation, its linear companion for p and the mean
    of the transformed forward state."""
    grid = grid or blocks.grid
    general = not blocks.c_is_zero()
    k = 4 * blocks.n
    P_rhs = check_rhs(blocks, general)

    def joint(t, X):
        P, p = X[:, :k], X[:, k:]
        b = blocks.at(t)
        dp = P @ b["B_bar"] @ p + b["B2_bar"] @ p
        if general:
            lead, M = _check_gain(b, P)
            dp = dp - lead @ np.linalg.solve(M, P @ b["B1_bar"] @ p)
        return np.hstack([P_rhs(t, P), dp])

    check = None
    if general:
        def check(t, X):
            d = float(np.linalg.det(np.eye(k) + X[:, :k] @ blocks.at(t)["C1_bar"]))
            if abs(d) < POS_TOL:
                raise RepresentationFailure(f"I + P C1 singular at t={t:.6g}", time=float(t))
            return d

    terminal = np.hstack([blocks.P_terminal, blocks.p_terminal])
    values, log = _backward(joint, terminal, grid, False, check)
    jpath = _as_path(grid, values, joint)
    P_vals, p_vals = values[:, :, :k], values[:, :, k:]
    ric = RiccatiSolution(
        hermite_path(grid, P_vals, np.stack([P_rhs(t, P_vals[j]) for j, t in enumerate(grid.nodes)])),
        residual_sup(P_rhs, P_vals, grid), log, kind="check-general" if general else "check")

    def mean_rhs(t, y):
        X = jpath.at(t)
        P, p = X[:, :k], X[:, k:]
        b = blocks.at(t)
        Amat = -b["A_bar"] - b["B_bar"] @ P
        bvec = -b["B_bar"] @ p
        if general:
            _, M = _check_gain(b, P)
            CD = b["C_bar"] + b["D_bar"]
            Amat = Amat + CD @ np.linalg.solve(M, P @ b["A1_bar"] + P @ b["B1_bar"] @ P)
            bvec = bvec + CD @ np.linalg.solve(M, P @ b["B1_bar"] @ p)
        return Amat @ y + bvec

    mean = integrate_ode(mean_rhs, np.zeros((k, 1)), grid, "forward")
    X_T = P_vals[-1] @ mean[-1] + p_vals[-1]
    Y_T = mean[-1] + blocks.H_check @ X_T
    return CheckSolution(ric, MatrixPath(grid, p_vals), mean[:, :, 0], Y_T[:, 0], X_T[:, 0])


def check_closed_form(blocks: CheckBlocks, grid: Optional[TimeGrid] = None) -> np.ndarray:
    grid = grid or blocks.grid
    if not blocks.c_is_zero():
        raise InvalidArgument("closed form requires C = 0")

    def gen(t):
        b = blocks.at(t)
        return np.block([[-b["A_bar"], -b["B_bar"]], [b["A2_bar"], b["B2_bar"]]])

    return riccati_closed_form(gen, blocks.P_terminal, grid)


# ---------------------------------------------------------------------------
# decoupling of a general linear backward-forward system


def solve_linear_decoupling(sys, grid: TimeGrid):
    """Deterministic decoupling field X = P Y + p of a linear system (see
    :class:`blqstack.bfsde.BfsdeSystem`); vector coefficients are columns.

    Returns the Hermite path of the stacked ``[P | p]``, its node values, the
    nondegeneracy log and a helper that evaluates the Z feedback.
    """
    ny, nx = sys.ny, sys.nx

    def parts(t, P, p):
        c = sys.coefficients(t)
        K = np.linalg.inv(np.eye(nx) - P @ c["sZ"])
        gain = K @ P @ (c["sY"] + c["sX"] @ P)
        z0 = K @ P @ (c["sX"] @ p + c["s0"])
        return c, gain, z0

    def joint(t, X):
        P, p = X[:, :ny], X[:, ny:]
        c, gain, z0 = parts(t, P, p)
        dP = c["fY"] + c["fX"] @ P - P @ c["bY"] - P @ c["bX"] @ P + (c["fZ"] - P @ c["bZ"]) @ gain
        dp = (c["fX"] @ p - P @ c["bX"] @ p + (c["fZ"] - P @ c["bZ"]) @ z0
              + c["f0"] - P @ c["b0"])
        return np.hstack([dP, dp])

    def check(t, X):
        d = float(np.linalg.det(np.eye(nx) - X[:, :ny] @ sys.coefficients(t)["sZ"]))
        if abs(d) < POS_TOL:
            raise RepresentationFailure(f"I - P sZ singular at t={t:.6g}", time=float(t))
        return d

    terminal = np.hstack([sys.G, sys.g0[:, None]])
    values, log = _backward(joint, terminal, grid, False, check)
    path = _as_path(grid, values, joint)
    return path, values, log, parts
