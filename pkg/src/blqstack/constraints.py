"""Terminal constraint sets: support functionals, feasibility classification
and projections in the metric induced by a positive-definite weight."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Union

import numpy as np

from .errors import InvalidArgument

INF = float("inf")
_TOL = 1e-12


def ext_real(x: float) -> Union[float, str]:
    """Serialise an extended real without relying on non-standard JSON tokens."""
    if x == INF:
        return "+inf"
    if x == -INF:
        return "-inf"
    return float(x)


def _vec(x, n: Optional[int] = None) -> np.ndarray:
    v = np.atleast_1d(np.asarray(x, dtype=float)).ravel()
    if n is not None and v.size != n:
        raise InvalidArgument(f"expected a {n}-vector, got {v.size} entries")
    return v


def _check_metric(G1, n: int) -> np.ndarray:
    G = np.atleast_2d(np.asarray(G1, dtype=float))
    if G.shape != (n, n):
        raise InvalidArgument(f"metric must be {n}x{n}")
    if not np.allclose(G, G.T, atol=1e-12):
        raise InvalidArgument("metric must be symmetric")
    if np.linalg.eigvalsh(0.5 * (G + G.T)).min() <= 0:
        raise InvalidArgument("metric must be positive definite")
    return 0.5 * (G + G.T)


class ConvexSet:
    n: int

    def support(self, p) -> float:
        raise NotImplementedError

    def contains(self, x, tol: float = _TOL) -> bool:
        raise NotImplementedError

    def project(self, x, G1=None) -> np.ndarray:
        raise NotImplementedError

    def contains_origin(self) -> bool:
        return self.contains(np.zeros(self.n))


@dataclass(frozen=True)
class FullSpace(ConvexSet):
    n: int

    def support(self, p) -> float:
        return 0.0 if not np.any(_vec(p, self.n)) else INF

    def contains(self, x, tol=_TOL):
        return bool(np.all(np.isfinite(_vec(x, self.n))))

    def project(self, x, G1=None):
        return _vec(x, self.n).copy()

    def to_dict(self):
        return {"type": "full_space", "n": self.n}


@dataclass(frozen=True, eq=False)
class Box(ConvexSet):
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo, hi = _vec(self.lower), _vec(self.upper)
        if lo.shape != hi.shape:
            raise InvalidArgument("box bounds must have equal length")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)) or np.any(lo > hi):
            raise InvalidArgument("box requires lower <= upper")
        if np.any(lo == INF) or np.any(hi == -INF):
            raise InvalidArgument("box would be empty")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def n(self) -> int:
        return self.lower.size

    def support(self, p) -> float:
        p = _vec(p, self.n)
        total = 0.0
        for pi, lo, hi in zip(p, self.lower, self.upper):
            if pi > 0:
                total += pi * hi if hi < INF else INF
            elif pi < 0:
                total += pi * lo if lo > -INF else INF
        return total

    def contains(self, x, tol=_TOL):
        x = _vec(x, self.n)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def project(self, x, G1=None):
        x = _vec(x, self.n)
        if G1 is None:
            return np.clip(x, self.lower, self.upper)
        G = _check_metric(G1, self.n)
        if np.count_nonzero(G - np.diag(np.diag(G))) == 0:
            return np.clip(x, self.lower, self.upper)
        return _box_active_set(x, G, self.lower, self.upper)

    def to_dict(self):
        return {"type": "box", "lower": [ext_real(v) for v in self.lower],
                "upper": [ext_real(v) for v in self.upper]}


def NonnegativeOrthant(n: int) -> Box:
    """The cone ``{x : x >= 0}`` as a box with infinite upper bounds."""
    return _Orthant(np.zeros(n), np.full(n, INF))


class _Orthant(Box):
    def to_dict(self):
        return {"type": "nonnegative_orthant", "n": self.n}

    def __repr__(self):
        return f"NonnegativeOrthant({self.n})"


@dataclass(frozen=True, eq=False)
class Halfspace(ConvexSet):
    """``{x : <normal, x> <= offset}``."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        a = _vec(self.normal)
        if not np.any(a):
            raise InvalidArgument("halfspace normal must be nonzero")
        object.__setattr__(self, "normal", a)
        object.__setattr__(self, "offset", float(self.offset))

    @property
    def n(self) -> int:
        return self.normal.size

    def support(self, p) -> float:
        p = _vec(p, self.n)
        a = self.normal
        t = float(p @ a) / float(a @ a)
        if t >= 0 and np.allclose(p, t * a, atol=1e-14, rtol=1e-12):
            return t * self.offset
        return INF

    def contains(self, x, tol=_TOL):
        return bool(self.normal @ _vec(x, self.n) <= self.offset + tol)

    def project(self, x, G1=None):
        x = _vec(x, self.n)
        gap = float(self.normal @ x) - self.offset
        if gap <= self.slack:
            return x.copy()
        G = np.eye(self.n) if G1 is None else _check_metric(G1, self.n)
        d = np.linalg.solve(G, self.normal)
        return x - d * (gap / float(self.normal @ d))

    @property
    def slack(self) -> float:
        # points this close to the boundary count as inside, which keeps projection idempotent
        return _TOL * (1.0 + abs(self.offset))

    def to_dict(self):
        return {"type": "halfspace", "normal": self.normal.tolist(), "offset": self.offset}


@dataclass(frozen=True, eq=False)
class Point(ConvexSet):
    c: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "c", _vec(self.c))

    @property
    def n(self) -> int:
        return self.c.size

    def support(self, p) -> float:
        return float(_vec(p, self.n) @ self.c)

    def contains(self, x, tol=_TOL):
        return bool(np.all(np.abs(_vec(x, self.n) - self.c) <= tol))

    def project(self, x, G1=None):
        _vec(x, self.n)
        if G1 is not None:
            _check_metric(G1, self.n)
        return self.c.copy()

    def to_dict(self):
        return {"type": "point", "c": self.c.tolist()}


def _box_active_set(x, G, lo, hi):
    """Exhaustive enumeration of the 3^n faces of a box for the G-metric QP."""
    n = x.size
    best, best_val = None, INF
    for pattern in itertools.product((0, -1, 1), repeat=n):
        fixed = [i for i in range(n) if pattern[i] != 0]
        vals = np.array([lo[i] if pattern[i] < 0 else hi[i] for i in fixed])
        if np.any(~np.isfinite(vals)):
            continue
        free = [i for i in range(n) if pattern[i] == 0]
        y = x.copy()
        if fixed:
            y[fixed] = vals
            if free:
                shift = vals - x[fixed]
                y[free] = x[free] - np.linalg.solve(G[np.ix_(free, free)],
                                                    G[np.ix_(free, fixed)] @ shift)
        if np.any(y[free] < lo[free] - _TOL) or np.any(y[free] > hi[free] + _TOL):
            continue
        d = y - x
        val = float(d @ G @ d)
        if val < best_val:
            best, best_val = y, val
    return np.clip(best, lo, hi)


def project(K: ConvexSet, x, G1) -> np.ndarray:
    """argmin over y in K of <G1 (y - x), y - x>."""
    return K.project(x, G1)


def project_rows(K: ConvexSet, X: np.ndarray, G1) -> np.ndarray:
    """Row-wise projection of an (M, n) array of scenario values."""
    X = np.asarray(X, dtype=float)
    if isinstance(K, FullSpace):
        return X.copy()
    if isinstance(K, Point):
        return np.broadcast_to(K.c, X.shape).copy()
    G = _check_metric(G1, K.n)
    if isinstance(K, Box) and np.count_nonzero(G - np.diag(np.diag(G))) == 0:
        return np.clip(X, K.lower, K.upper)
    if isinstance(K, Halfspace):
        gap = X @ K.normal - K.offset
        gap = np.where(gap > K.slack, gap, 0.0)
        d = np.linalg.solve(G, K.normal)
        return X - np.outer(gap / float(K.normal @ d), d)
    return np.stack([K.project(row, G) for row in X])


@dataclass(frozen=True, eq=False)
class ConstraintSpec:
    K: ConvexSet
    alpha: np.ndarray = None
    beta: float = 0.0
    pointwise_enabled: bool = True
    affine_enabled: bool = True

    def __post_init__(self):
        alpha = np.zeros(self.K.n) if self.alpha is None else _vec(self.alpha, self.K.n)
        if self.affine_enabled and not np.any(alpha):
            raise InvalidArgument("affine constraint requires a nonzero alpha")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", float(self.beta))

    @property
    def n(self) -> int:
        return self.K.n

    @property
    def effective_set(self) -> ConvexSet:
        return self.K if self.pointwise_enabled else FullSpace(self.K.n)

    def to_dict(self):
        return {"K": self.K.to_dict(), "alpha": self.alpha.tolist(), "beta": self.beta,
                "pointwise_enabled": self.pointwise_enabled,
                "affine_enabled": self.affine_enabled}


class Feasibility(str, Enum):
    NONTRIVIAL_BOTH = "NontrivialBoth"
    POINTWISE_ONLY = "PointwiseOnly"
    EMPTY = "Empty"
    EXPOSED_FACE = "ExposedFace"
    DEGENERATED_BREADTH = "DegeneratedBreadth"


@dataclass(frozen=True)
class FeasibilityVerdict:
    cls: Feasibility
    support_plus: float
    support_minus: float
    breadth: float
    condition_F: bool
    # for zero breadth the set is either all of U_K or empty
    outcome: Feasibility = field(default=None)

    def __post_init__(self):
        if self.outcome is None:
            object.__setattr__(self, "outcome", self.cls)

    def to_dict(self):
        return {"class": self.cls.value, "outcome": self.outcome.value,
                "support_plus": ext_real(self.support_plus),
                "support_minus": ext_real(self.support_minus),
                "breadth": ext_real(self.breadth), "condition_F": self.condition_F}


def support_fn(K: ConvexSet, p) -> float:
    return K.support(p)


def classify_feasibility(spec: ConstraintSpec, tol: float = _TOL) -> FeasibilityVerdict:
    alpha = spec.alpha
    if not np.any(alpha):
        raise InvalidArgument("alpha must be nonzero")
    K = spec.effective_set
    hp, hm = K.support(alpha), K.support(-alpha)
    breadth = hp + hm
    beta = spec.beta
    cond_F = bool(-hm < beta < hp)
    scale = tol * (1.0 + abs(beta))
    if breadth > scale:
        if beta > hp + scale:
            cls = Feasibility.EMPTY
        elif hp < INF and abs(beta - hp) <= scale:
            cls = Feasibility.EXPOSED_FACE
        elif beta <= -hm + scale:
            cls = Feasibility.POINTWISE_ONLY
        else:
            cls = Feasibility.NONTRIVIAL_BOTH
        return FeasibilityVerdict(cls, hp, hm, breadth, cond_F)
    outcome = Feasibility.POINTWISE_ONLY if beta <= hp + scale else Feasibility.EMPTY
    return FeasibilityVerdict(Feasibility.DEGENERATED_BREADTH, hp, hm, breadth, cond_F, outcome)


def mean_membership_check(samples, weights, K: ConvexSet, tol: float = 1e-12) -> bool:
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[1] != K.n and samples.shape[0] == K.n and K.n != 1:
        samples = samples.T
    if K.n == 1 and samples.shape[1] != 1:
        samples = samples.reshape(-1, 1)
    w = np.asarray(weights, dtype=float).ravel()
    if w.size != samples.shape[0] or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
        raise InvalidArgument("weights must be nonnegative and sum to one")
    return K.contains(w @ samples, tol)
