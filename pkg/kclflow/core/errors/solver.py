"""
Power-Flow Solver Error Handling
"""

from typing import Optional, Dict, Any, List

from .base import BaseError, ErrorContext, EXIT_NUMERICAL, EXIT_VALIDATION, with_prefix


class SolverError(BaseError):
    """Base class for all power-flow errors."""

    def __init__(
        self,
        message: str,
        error_code: str,
        exit_code: int = EXIT_NUMERICAL,
        context: Optional[ErrorContext] = None,
        details: Optional[Dict[str, Any]] = None,
        suggestions: Optional[List[str]] = None
    ):
        error_code = with_prefix("PF", error_code)
        super().__init__(
            message,
            error_code,
            exit_code,
            context,
            details,
            suggestions
        )


class ZeroImpedanceError(SolverError):
    """A branch has r = x = 0."""

    def __init__(
        self,
        branch_id: int,
        error_code: str = "PF-YBUS-ZERO-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            f"Branch {branch_id} has zero series impedance",
            error_code,
            exit_code=EXIT_VALIDATION,
            context=context,
            details={'branch_id': branch_id}
        )
        self.branch_id = branch_id


class DivergedError(SolverError):
    """Newton-Raphson hit its iteration limit."""

    def __init__(
        self,
        iterations: int,
        mismatch: float,
        error_code: str = "PF-NR-DIVERGED-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            f"Newton-Raphson did not converge after {iterations} iterations "
            f"(max mismatch {mismatch:.3e} p.u.)",
            error_code,
            context=context,
            details={'iterations': iterations, 'mismatch': mismatch},
            suggestions=["Increase max_iter", "Check the operating point is feasible"]
        )
        self.iterations = iterations
        self.mismatch = mismatch


class SingularJacobianError(SolverError):
    """The power-flow Jacobian cannot be factorised."""

    def __init__(
        self,
        iteration: int,
        error_code: str = "PF-NR-SINGULAR-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            f"Singular Jacobian at iteration {iteration}",
            error_code,
            context=context,
            details={'iteration': iteration}
        )
        self.iteration = iteration
