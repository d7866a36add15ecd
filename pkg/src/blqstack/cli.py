"""Command-line entry point: ``blqstack {solve,certify,oracle-compare,finance-demo}``.

Configurations are YAML files. Schema problems exit with status 2 before any
solver runs; solver failures exit with status 3 after writing a report that
carries the machine-readable error class.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import platform
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import yaml

from . import __version__
from .bfsde import certify
from .constraints import (Box, ConstraintSpec, FullSpace, Halfspace, NonnegativeOrthant, Point,
                          classify_feasibility)
from .core import MatrixPath, ScenarioEnsemble, build_grid, sample_ensemble
from .errors import InvalidArgument, SolverError
from .follower import GameCoefficients, TerminalControl, solve_blq
from .leader import solve_p1_pointwise, solve_p2_affine, solve_p_general, verify_kkt
from .oracle import DiscreteGame, MAX_STEPS, convergence_table, oracle_leader
from .riccati import (follower_convexity_certificate, leader_convexity_certificate, solve_sre1,
                      solve_sre2)

log = logging.getLogger("blqstack")

EXIT_OK, EXIT_SCHEMA, EXIT_SOLVER = 0, 2, 3
SOLVERS = ("blq", "p1", "p2", "general", "certify", "oracle")
METHODS = ("auto", "reduction", "picard")
PATH_NAMES = ("A", "B1", "B2", "C", "Q1", "Q2", "S1", "S2", "R11", "R22")
TERMINAL_NAMES = ("G1", "H1", "H2")
SYMMETRIC = ("Q1", "Q2", "S1", "S2", "R11", "R22", "G1", "H1", "H2")
SYM_TOL = 1e-12
TOP_KEYS = {"horizon", "steps", "dims", "coefficients", "constraint", "solver", "method",
            "ensemble", "tolerances", "terminal", "certificate", "output", "picard", "preset"}


class ConfigError(Exception):
    error_class = "schema-violation"


@dataclass
class ProblemConfig:
    horizon: float
    steps: int
    n: int
    m1: int
    m2: int
    coefficients: Dict[str, np.ndarray]
    constraint: Optional[dict]
    solver: str = "general"
    method: str = "auto"
    M: int = 0
    seed: int = 0
    antithetic: bool = False
    tol_kkt: float = 1e-8
    tol_picard: float = 1e-9
    terminal: Optional[np.ndarray] = None
    epsilon: float = 1.0
    picard: Dict[str, Any] = field(default_factory=dict)
    output: Optional[str] = None
    preset: Optional[dict] = None
    raw: Dict[str, Any] = field(default_factory=dict)
    asymmetry: Dict[str, float] = field(default_factory=dict)

    @property
    def digest(self) -> str:
        blob = json.dumps(self.raw, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()

    def grid(self):
        return build_grid(self.horizon, self.steps)

    def game(self) -> GameCoefficients:
        grid = self.grid()
        paths = {name: MatrixPath(grid, self.coefficients[name]) for name in PATH_NAMES}
        return GameCoefficients(grid, G1=self.coefficients["G1"], H1=self.coefficients["H1"],
                                H2=self.coefficients["H2"], **paths)

    def constraint_spec(self) -> Optional[ConstraintSpec]:
        if self.constraint is None:
            return None
        c = self.constraint
        return ConstraintSpec(_build_set(c["set"], self.n), c.get("alpha"), c.get("beta", 0.0),
                              c.get("pointwise", True), c.get("affine", True))

    def ensemble(self) -> Optional[ScenarioEnsemble]:
        if self.M <= 0:
            return None
        return sample_ensemble(self.grid(), self.M, self.seed, self.antithetic)


# ---------------------------------------------------------------------------
# schema


def _require(cond: bool, msg: str):
    if not cond:
        raise ConfigError(msg)


def _number(d: dict, key: str, default=None, positive=False, integer=False):
    v = d.get(key, default)
    _require(v is not None, f"missing required key {key!r}")
    _require(isinstance(v, (int, float)) and not isinstance(v, bool), f"{key} must be a number")
    if integer:
        _require(float(v).is_integer(), f"{key} must be an integer")
        v = int(v)
    _require(math.isfinite(v), f"{key} must be finite")
    if positive:
        _require(v > 0, f"{key} must be positive")
    return v


def _matrix_value(name: str, v, shape, N: int) -> np.ndarray:
    """Scalar, row-major matrix, or a list of N+1 node values; returns (N+1,)+shape."""
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: not numeric") from None
    _require(np.all(np.isfinite(arr)), f"{name}: non-finite entries")
    r, c = shape
    if arr.ndim == 0:
        _require(r == c or float(arr) == 0.0 or min(shape) == 1,
                 f"{name}: scalar needs a square shape")
        base = float(arr) * np.eye(r, c)
        return np.broadcast_to(base, (N + 1, r, c)).copy()
    if arr.shape == shape or (arr.ndim == 1 and arr.size == r * c and arr.size != N + 1):
        return np.broadcast_to(arr.reshape(shape), (N + 1, r, c)).copy()
    if arr.shape[0] == N + 1:
        nodal = arr.reshape((N + 1,) + shape) if arr[0].size == r * c else None
        _require(nodal is not None, f"{name}: node values must be {shape}")
        return nodal
    raise ConfigError(f"{name}: expected shape {shape} or {N + 1} node values, got {arr.shape}")


def _symmetrize(name: str, M: np.ndarray, report: Dict[str, float]) -> np.ndarray:
    asym = float(np.max(np.abs(M - np.swapaxes(M, -1, -2)))) if M.size else 0.0
    _require(asym <= SYM_TOL, f"{name} is not symmetric (asymmetry {asym:.3g})")
    report[name] = asym
    return 0.5 * (M + np.swapaxes(M, -1, -2))


def _build_set(s: dict, n: int):
    kind = s.get("type")
    if kind == "full":
        return FullSpace(n)
    if kind == "orthant":
        return NonnegativeOrthant(n)
    if kind == "box":
        lo = [(-math.inf if v is None else float(v)) for v in s.get("lower", [None] * n)]
        hi = [(math.inf if v is None else float(v)) for v in s.get("upper", [None] * n)]
        return Box(lo, hi)
    if kind == "halfspace":
        return Halfspace(s["normal"], s["offset"])
    if kind == "point":
        return Point(s["c"])
    raise ConfigError(f"unknown set type {kind!r}")


def _check_constraint(c, n: int) -> dict:
    _require(isinstance(c, dict), "constraint must be a table")
    unknown = set(c) - {"set", "alpha", "beta", "pointwise", "affine"}
    _require(not unknown, f"unknown constraint keys {sorted(unknown)}")
    s = c.get("set", {"type": "full"})
    _require(isinstance(s, dict), "constraint.set must be a table")
    kind = s.get("type")
    need = {"full": (), "orthant": (), "box": (), "halfspace": ("normal", "offset"), "point": ("c",)}
    _require(kind in need, f"constraint.set.type must be one of {sorted(need)}")
    for key in need[kind]:
        _require(key in s, f"constraint.set needs {key!r}")
    for key in ("lower", "upper", "normal", "c"):
        if key in s:
            _require(isinstance(s[key], list) and len(s[key]) == n,
                     f"constraint.set.{key} must list {n} entries")
    if kind == "box":
        for key in ("lower", "upper"):
            for v in s.get(key, []):
                _require(v is None or isinstance(v, (int, float)), f"constraint.set.{key}: numbers or null")
    if "alpha" in c:
        _require(isinstance(c["alpha"], list) and len(c["alpha"]) == n,
                 f"constraint.alpha must list {n} entries")
    if "beta" in c:
        _number(c, "beta")
    for key in ("pointwise", "affine"):
        _require(isinstance(c.get(key, True), bool), f"constraint.{key} must be boolean")
    if c.get("affine", True):
        _require("alpha" in c, "constraint.alpha is required when the affine constraint is on")
    out = dict(c)
    out["set"] = s
    try:
        _build_set(s, n)
    except (ValueError, SolverError) as exc:
        raise ConfigError(f"constraint.set: {exc}") from None
    return out


def load_config(raw: Dict[str, Any]) -> ProblemConfig:
    """Validate a configuration mapping."""
    _require(isinstance(raw, dict), "configuration must be a mapping")
    unknown = set(raw) - TOP_KEYS
    _require(not unknown, f"unknown top-level keys {sorted(unknown)}")
    T = _number(raw, "horizon", positive=True)
    N = _number(raw, "steps", positive=True, integer=True)
    dims = raw.get("dims", {"n": 1})
    _require(isinstance(dims, dict), "dims must be a table")
    n = _number(dims, "n", 1, positive=True, integer=True)
    m1 = _number(dims, "m1", n, positive=True, integer=True)
    m2 = _number(dims, "m2", n, positive=True, integer=True)
    coeffs = raw.get("coefficients", {})
    _require(isinstance(coeffs, dict), "coefficients must be a table")
    unknown = set(coeffs) - set(PATH_NAMES) - set(TERMINAL_NAMES)
    _require(not unknown, f"unknown coefficients {sorted(unknown)}")
    shapes = {"A": (n, n), "B1": (n, m1), "B2": (n, m2), "C": (n, n), "Q1": (n, n), "Q2": (n, n),
              "S1": (n, n), "S2": (n, n), "R11": (m1, m1), "R22": (m2, m2), "G1": (n, n),
              "H1": (n, n), "H2": (n, n)}
    defaults = {"R11": 1.0, "R22": 1.0, "G1": 1.0}
    mats, asym = {}, {}
    for name, shape in shapes.items():
        v = coeffs.get(name, defaults.get(name, 0.0))
        arr = _matrix_value(name, v, shape, N)
        if name in SYMMETRIC:
            arr = _symmetrize(name, arr, asym)
        if name in TERMINAL_NAMES:
            _require(np.allclose(arr, arr[0]), f"{name} is a terminal weight and must be constant")
            arr = arr[0]
        mats[name] = arr
    solver = raw.get("solver", "general")
    _require(solver in SOLVERS, f"solver must be one of {SOLVERS}")
    method = raw.get("method", "auto")
    _require(method in METHODS, f"method must be one of {METHODS}")
    ens = raw.get("ensemble", {}) or {}
    _require(isinstance(ens, dict), "ensemble must be a table")
    M = _number(ens, "M", 0, integer=True)
    _require(M >= 0, "ensemble.M must be non-negative")
    seed = _number(ens, "seed", 0, integer=True)
    anti = ens.get("antithetic", False)
    _require(isinstance(anti, bool), "ensemble.antithetic must be boolean")
    tols = raw.get("tolerances", {}) or {}
    _require(isinstance(tols, dict), "tolerances must be a table")
    tk = _number(tols, "kkt", 1e-8, positive=True)
    tp = _number(tols, "picard", 1e-9, positive=True)
    constraint = raw.get("constraint")
    if constraint is not None:
        constraint = _check_constraint(constraint, n)
    _require(solver in ("blq", "certify") or constraint is not None,
             f"solver {solver!r} needs a constraint table")
    terminal = raw.get("terminal")
    if terminal is not None:
        _require(isinstance(terminal, list) and len(terminal) == n, f"terminal must list {n} entries")
        terminal = np.asarray(terminal, dtype=float)
    _require(solver != "blq" or terminal is not None, "solver 'blq' needs a terminal value")
    if solver == "oracle":
        _require(N <= MAX_STEPS, f"oracle grids are limited to {MAX_STEPS} steps")
    cert = raw.get("certificate", {}) or {}
    _require(isinstance(cert, dict), "certificate must be a table")
    eps = _number(cert, "epsilon", 1.0, positive=True)
    picard = raw.get("picard", {}) or {}
    _require(isinstance(picard, dict), "picard must be a table")
    unknown = set(picard) - {"rho", "max_iter", "degree", "stderr_batches"}
    _require(not unknown, f"unknown picard keys {sorted(unknown)}")
    out = raw.get("output")
    _require(out is None or isinstance(out, str), "output must be a path")
    return ProblemConfig(float(T), N, n, m1, m2, mats, constraint, solver, method, M, seed, anti,
                         tk, tp, terminal, eps, dict(picard), out, raw.get("preset"), raw, asym)


def read_config(path: str) -> ProblemConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed YAML: {exc}") from None
    return load_config(raw)


# ---------------------------------------------------------------------------
# quadratic hedging presets


def finance_preset(name: str = "affine", r=0.02, mu=0.07, sigma=0.2, steps: int = 200,
                   horizon: float = 1.0, R1: float = 1.0, R2: float = 1.0, alpha: float = 1.0,
                   beta: float = 1.0, Q1: float = 0.1, Q2: float = 0.1, S1: float = 0.1,
                   S2: float = 0.1, G1: float = 1.0, H1: float = 0.1, H2: float = 0.1,
                   M: int = 2000, seed: int = 0) -> ProblemConfig:
    """Wealth dynamics with drift r X + (μ - r)/σ Z and consumption rates of
    both agents: A = r, B1 = B2 = -1, C = (μ - r)/σ. ``r``, ``mu`` and
    ``sigma`` are constants or lists of node values."""
    if name not in ("pointwise", "affine", "both"):
        raise ConfigError(f"unknown preset {name!r}")
    N = int(steps)
    rv, mv, sv = (np.broadcast_to(np.asarray(x, dtype=float), (N + 1,)) for x in (r, mu, sigma))
    if np.any(sv <= 0):
        raise InvalidArgument("volatility must be positive")
    if np.any(mv <= rv):
        raise InvalidArgument("the risk premium mu - r must be positive")
    for label, v in (("R1", R1), ("R2", R2), ("G1", G1), ("S1", S1), ("S2", S2)):
        if v <= 0:
            raise InvalidArgument(f"{label} must be positive")
    for label, v in (("Q1", Q1), ("Q2", Q2), ("H1", H1)):
        if v < 0:
            raise InvalidArgument(f"{label} must be non-negative")
    theta = (mv - rv) / sv
    raw = {
        "preset": {"name": name, "r": np.asarray(r).tolist(), "mu": np.asarray(mu).tolist(),
                   "sigma": np.asarray(sigma).tolist()},
        "horizon": float(horizon), "steps": N, "dims": {"n": 1, "m1": 1, "m2": 1},
        "coefficients": {"A": rv.tolist(), "B1": -1.0, "B2": -1.0, "C": theta.tolist(),
                         "Q1": Q1, "Q2": Q2, "S1": S1, "S2": S2, "R11": R1, "R22": R2,
                         "G1": G1, "H1": H1, "H2": H2},
        "ensemble": {"M": int(M), "seed": int(seed)},
    }
    if name == "pointwise":
        raw["constraint"] = {"set": {"type": "orthant"}, "affine": False}
        raw["solver"] = "p1"
    elif name == "affine":
        raw["constraint"] = {"set": {"type": "full"}, "alpha": [alpha], "beta": beta,
                             "pointwise": False}
        raw["solver"] = "p2"
    else:
        raw["constraint"] = {"set": {"type": "orthant"}, "alpha": [alpha], "beta": beta}
        raw["solver"] = "general"
    return load_config(raw)


# ---------------------------------------------------------------------------
# running


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


UNITS = {"t": "time", "g": "adjoint", "Ybar": "adjoint", "Y": "adjoint", "Xbar": "state",
         "X": "state", "h": "state", "Zbar": "state/sqrt(time)", "Z": "state/sqrt(time)",
         "q": "state/sqrt(time)", "u1": "control/time", "u2": "control/time"}


def write_trajectories(path: Path, grid, series: Dict[str, tuple]):
    """``series`` maps a name to (mean, std), each of shape (N+1, dim)."""
    header = ["t [time]"]
    cols = [grid.nodes]
    for name, (mean, std) in series.items():
        for j in range(mean.shape[1]):
            unit = UNITS.get(name, "1")
            header += [f"{name}_{j}_mean [{unit}]", f"{name}_{j}_std [{unit}]"]
            cols += [mean[:, j], std[:, j]]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in np.column_stack(cols):
            w.writerow([repr(float(v)) if np.isfinite(v) else "" for v in row])


def _vp_series(paths: dict):
    return {k: (v.mean(), v.std()) for k, v in paths.items()}


def _picard_options(cfg: ProblemConfig) -> dict:
    opts = {"tol": cfg.tol_picard}
    opts.update(cfg.picard)
    return opts


def _certificate_block(cfg: ProblemConfig, coeffs: GameCoefficients) -> dict:
    grid = coeffs.grid
    sre1 = solve_sre1(coeffs, grid=grid)
    sre2 = solve_sre2(coeffs, grid=grid)
    fc = follower_convexity_certificate(sre1, coeffs.H2)
    lc = leader_convexity_certificate(sre2, coeffs.H1)
    out = {
        "follower_convexity": {"ok": fc.ok, "margin": fc.margin, "residual": sre1.residual_sup},
        "leader_convexity": {"ok": lc.ok, "margin": lc.margin, "residual": sre2.residual_sup},
        "bfsde2": certify(coeffs, "bfsde2", grid=grid).to_dict(),
        "follower_system": certify(coeffs, "follower", grid=grid).to_dict(),
    }
    if cfg.preset is not None or coeffs.n == 1:
        out["remark61"] = certify(coeffs, "remark61", epsilon=cfg.epsilon, grid=grid).to_dict()
    return out


def _solve_equilibrium(cfg: ProblemConfig, coeffs, spec, override: bool):
    ens = cfg.ensemble()
    opts = _picard_options(cfg)
    if cfg.solver == "p1":
        return solve_p1_pointwise(coeffs, spec, ensemble=ens, picard_options=opts,
                                  override_certificate=override, method=cfg.method)
    if cfg.solver == "p2":
        return solve_p2_affine(coeffs, spec, ensemble=ens)
    return solve_p_general(coeffs, spec, ensemble=ens, picard_options=opts,
                           override_certificate=override, method=cfg.method)


def _run_solve(cfg: ProblemConfig, out: Path, override: bool, report: dict) -> dict:
    coeffs = cfg.game()
    grid = coeffs.grid
    spec = cfg.constraint_spec()
    if cfg.solver == "certify":
        report["certificates"] = _certificate_block(cfg, coeffs)
        return {}
    if spec is not None and spec.affine_enabled:
        report["feasibility"] = classify_feasibility(spec).to_dict()
    if cfg.solver == "blq":
        sol = solve_blq(coeffs, TerminalControl.deterministic(cfg.terminal), ensemble=cfg.ensemble(),
                        picard_options=_picard_options(cfg))
        report["costs"] = {"J2": sol.J2, "J2_stderr": sol.J2_stderr}
        report["residuals"] = {"stationarity": sol.stationarity_residual,
                               "sre1": sol.sre1.residual_sup}
        report["certificates"] = {"follower_convexity": {"ok": sol.certificate.ok,
                                                         "margin": sol.certificate.margin}}
        series = _vp_series({"u2": sol.u2, "X": sol.X, "Z": sol.Z, "Y": sol.Y})
        return {"grid": grid, "series": series}
    if cfg.solver == "oracle":
        dg = DiscreteGame.from_coefficients(coeffs, cfg.steps, spec)
        o = oracle_leader(dg)
        report["oracle"] = o.to_dict()
        report["costs"] = {"J1": o.J1, "J2": o.J2}
        report["residuals"] = {"kkt": o.kkt_residual}
        pad = lambda u: np.vstack([u, np.full((1, u.shape[1]), np.nan)])
        zeros = lambda a: np.zeros_like(a)
        series = {"X": (o.X, zeros(o.X)), "u1": (pad(o.u1), zeros(pad(o.u1))),
                  "u2": (pad(o.u2), zeros(pad(o.u2)))}
        return {"grid": dg.grid, "series": series}
    sol = _solve_equilibrium(cfg, coeffs, spec, override)
    report["equilibrium"] = sol.to_dict()
    report["certificates"] = sol.certificates
    report["diagnostics"] = None if sol.diagnostics is None else sol.diagnostics.to_dict()
    report["kkt"] = verify_kkt(sol, spec, cfg.tol_kkt, coeffs)
    report["costs"] = {"J1": sol.J1, "J2": sol.J2}
    report["residuals"] = {k: v for k, v in sol.extras.items() if "residual" in k}
    return {"grid": sol.grid, "series": _vp_series(sol.paths)}


def _run_oracle_compare(cfg: ProblemConfig, override: bool, report: dict) -> dict:
    coeffs = cfg.game()
    spec = cfg.constraint_spec()
    solver = cfg.solver if cfg.solver in ("p1", "p2", "general") else "general"
    sol = _solve_equilibrium(replace(cfg, solver=solver), coeffs, spec, override)
    table = convergence_table(sol, coeffs, spec)
    table2 = convergence_table(sol, coeffs, spec, metric="J2_gap")
    report["equilibrium"] = sol.to_dict()
    report["costs"] = {"J1": sol.J1, "J2": sol.J2}
    report["convergence"] = {"J1": table.to_dict(), "J2": table2.to_dict()}
    return {"grid": sol.grid, "series": _vp_series(sol.paths)}


def run(command: str, cfg: ProblemConfig, out: Path, override: bool = False) -> int:
    out.mkdir(parents=True, exist_ok=True)
    report: Dict[str, Any] = {
        "command": command, "config_digest": cfg.digest, "seed": cfg.seed,
        "solver": cfg.solver, "symmetrization": cfg.asymmetry,
        "versions": {"blqstack": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    manifest: List[str] = []
    start = time.perf_counter()
    status = EXIT_OK
    try:
        if command == "certify":
            report["certificates"] = _certificate_block(cfg, cfg.game())
            traj = {}
        elif command == "oracle-compare":
            traj = _run_oracle_compare(cfg, override, report)
        else:
            traj = _run_solve(cfg, out, override, report)
        if traj:
            write_trajectories(out / "trajectories.csv", traj["grid"], traj["series"])
            manifest.append("trajectories.csv")
        report["status"] = "ok"
    except SolverError as exc:
        log.error("solver failure: %s", exc)
        report["status"] = "error"
        report["error"] = exc.to_dict()
        status = EXIT_SOLVER
    report["wall_clock_seconds"] = time.perf_counter() - start
    manifest.append("report.json")
    report["manifest"] = manifest
    (out / "report.json").write_text(json.dumps(_jsonable(report), indent=2, sort_keys=True))
    return status


def _apply_overrides(cfg: ProblemConfig, args) -> ProblemConfig:
    raw = json.loads(json.dumps(cfg.raw, default=str))
    if args.seed is not None:
        raw.setdefault("ensemble", {})["seed"] = args.seed
    if args.scenarios is not None:
        raw.setdefault("ensemble", {})["M"] = args.scenarios
    if args.grid is not None:
        if raw.get("preset"):
            raise ConfigError("--grid cannot resample preset node values; use --preset options")
        raw["steps"] = args.grid
    if args.tol is not None:
        raw.setdefault("tolerances", {})["kkt"] = args.tol
    return load_config(raw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blqstack", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=("solve", "certify", "oracle-compare", "finance-demo"))
    p.add_argument("--config", help="YAML problem configuration")
    p.add_argument("--out", help="output directory (default: config output or ./out)")
    p.add_argument("--seed", type=int)
    p.add_argument("--scenarios", type=int, help="Monte Carlo scenario count")
    p.add_argument("--grid", type=int, help="number of time steps")
    p.add_argument("--tol", type=float, help="KKT tolerance")
    p.add_argument("--override-certificate", action="store_true",
                   help="run the Picard route even when the contraction certificate fails")
    p.add_argument("--preset", default="affine", choices=("pointwise", "affine", "both"),
                   help="finance-demo constraint variant")
    p.add_argument("--r", type=float, default=0.02, help="finance-demo interest rate")
    p.add_argument("--mu", type=float, default=0.07, help="finance-demo stock drift")
    p.add_argument("--sigma", type=float, default=0.2, help="finance-demo volatility")
    p.add_argument("--beta", type=float, default=1.0, help="finance-demo expected-wealth floor")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out or "out")
    try:
        if args.command == "finance-demo":
            cfg = finance_preset(args.preset, args.r, args.mu, args.sigma, beta=args.beta,
                                 steps=args.grid or 200)
            args.grid = None
        else:
            if not args.config:
                raise ConfigError(f"{args.command} needs --config")
            cfg = read_config(args.config)
            if args.out is None and cfg.output:
                out = Path(cfg.output)
        cfg = _apply_overrides(cfg, args)
    except (ConfigError, SolverError) as exc:
        cls = getattr(exc, "error_class", "schema-violation")
        out.mkdir(parents=True, exist_ok=True)
        err = {"status": "error", "error": {"error_class": cls, "message": str(exc)}}
        (out / "report.json").write_text(json.dumps(err, indent=2))
        print(f"error [{cls}]: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    command = "certify" if args.command == "certify" else (
        "oracle-compare" if args.command == "oracle-compare" else "solve")
    status = run(command, cfg, out, args.override_certificate)
    print(f"{args.command}: {'ok' if status == EXIT_OK else 'failed'} -> {out / 'report.json'}")
    return status


if __name__ == "__main__":
    sys.exit(main())
