"""
Grid Error Handling

This module defines topology and grid-validation errors.
"""

from typing import Optional, Dict, Any, List

from .base import BaseError, ErrorContext, ErrorSeverity, EXIT_VALIDATION, with_prefix


class GridError(BaseError):
    """Base class for all grid-related errors."""

    def __init__(
        self,
        message: str,
        error_code: str,
        context: Optional[ErrorContext] = None,
        details: Optional[Dict[str, Any]] = None,
        suggestions: Optional[List[str]] = None
    ):
        error_code = with_prefix("GRID", error_code)
        super().__init__(
            message,
            error_code,
            EXIT_VALIDATION,
            context,
            details,
            suggestions
        )


class GridValidationError(GridError):
    """A grid violates one of its structural invariants."""

    def __init__(
        self,
        message: str,
        invariant: str,
        error_code: str = "GRID-VAL-INV-001",
        context: Optional[ErrorContext] = None,
        details: Optional[Dict[str, Any]] = None
    ):
        details = details or {}
        details['invariant'] = invariant
        super().__init__(
            message,
            error_code,
            context=context,
            details=details,
            suggestions=[
                "Check bus ids are dense and 0-based",
                "Check there is exactly one slack bus",
                "Check the grid is connected"
            ]
        )
        self.invariant = invariant
        self.set_severity(ErrorSeverity.WARNING)


class SlackAdjacentError(GridError):
    """Removing a branch incident to the slack bus is not an admissible contingency."""

    def __init__(
        self,
        branch_id: int,
        slack_bus: int,
        error_code: str = "GRID-N1-SLACK-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            f"Branch {branch_id} is incident to the slack bus {slack_bus}",
            error_code,
            context=context,
            details={'branch_id': branch_id, 'slack_bus': slack_bus},
            suggestions=["Pick a branch that does not touch the slack bus"]
        )
        self.branch_id = branch_id
        self.set_severity(ErrorSeverity.WARNING)


class WouldIslandError(GridError):
    """Removing the branch disconnects the grid."""

    def __init__(
        self,
        branch_id: int,
        error_code: str = "GRID-N1-ISLAND-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            f"Removing branch {branch_id} would island the grid",
            error_code,
            context=context,
            details={'branch_id': branch_id},
            suggestions=["Pick a branch that lies on a cycle"]
        )
        self.branch_id = branch_id
        self.set_severity(ErrorSeverity.WARNING)


class IsolatedBusError(GridError):
    """A bus has no incident branch, so its KCL rows are empty."""

    def __init__(
        self,
        bus_id: int,
        error_code: str = "GRID-BUS-ISOLATED-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            f"Bus {bus_id} has no incident branch",
            error_code,
            context=context,
            details={'bus_id': bus_id}
        )
        self.bus_id = bus_id
