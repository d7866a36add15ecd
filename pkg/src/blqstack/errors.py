"""Error hierarchy. Each class carries a machine-readable ``error_class`` tag
that the command-line layer writes into its reports."""

from __future__ import annotations


class SolverError(Exception):
    error_class = "solver-error"

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.details = details

    def to_dict(self) -> dict:
        return {"error_class": self.error_class, "message": str(self), **self.details}


class InvalidArgument(SolverError, ValueError):
    error_class = "invalid-argument"


class NumericalBlowup(SolverError):
    error_class = "numerical-blowup"


class ConstraintViolation(SolverError):
    error_class = "constraint-violation"


class RepresentationFailure(SolverError):
    error_class = "representation-failure"


class NotConvex(SolverError):
    error_class = "not-convex"


class NoConvergence(SolverError):
    error_class = "no-convergence"


class KKTIndeterminate(SolverError):
    error_class = "kkt-indeterminate"


class KKTBracketFailure(SolverError):
    error_class = "kkt-bracket-failure"


class IllConditionedRegression(SolverError):
    error_class = "ill-conditioned-regression"


class Refused(SolverError):
    error_class = "refused"


class InstanceTooLarge(SolverError):
    error_class = "instance-too-large"
