# app/errors.py
from typing import Optional


class WgfError(Exception):
    """Base class for solver library errors."""


class InvalidInputError(WgfError, ValueError):
    """Arguments outside the documented preconditions."""


class NonAdmissibleMeshError(InvalidInputError):
    """Mesh violates the TPFA admissibility conditions."""


class DomainError(InvalidInputError):
    """Function evaluated outside its domain of definition."""


class ConfigError(InvalidInputError):
    """Run configuration could not be read or validated."""


class SolverFailureError(WgfError, RuntimeError):
    """Nonlinear or linear solve did not converge."""

    def __init__(
        self,
        message: str,
        iterations: int = 0,
        residual_linf: float = float("nan"),
        tau: Optional[float] = None,
        step: Optional[int] = None,
    ):
        self.iterations = iterations
        self.residual_linf = residual_linf
        self.tau = tau
        self.step = step
        details = f"iterations={iterations}, residual={residual_linf:.3e}"
        if tau is not None:
            details += f", tau={tau:.3e}"
        if step is not None:
            details += f", step={step}"
        super().__init__(f"{message} ({details})")
