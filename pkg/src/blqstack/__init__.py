"""Numerical toolkit for linear-quadratic Stackelberg games driven by a
backward state equation with a constrained terminal control."""

from .core import MatrixPath, ScenarioEnsemble, TimeGrid, VectorPath, build_grid, sample_ensemble
from .errors import SolverError

__all__ = ["MatrixPath", "ScenarioEnsemble", "SolverError", "TimeGrid", "VectorPath",
           "build_grid", "sample_ensemble"]
__version__ = "0.1.0"
