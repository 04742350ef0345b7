"""
Surrogate Network Error Handling
"""

from typing import Optional, Dict, Any

from .base import BaseError, ErrorContext, EXIT_VALIDATION, with_prefix


class NetworkError(BaseError):
    """Base class for surrogate-network errors."""

    def __init__(
        self,
        message: str,
        error_code: str,
        context: Optional[ErrorContext] = None,
        details: Optional[Dict[str, Any]] = None
    ):
        error_code = with_prefix("NET", error_code)
        super().__init__(message, error_code, EXIT_VALIDATION, context, details)


class ShapeMismatchError(NetworkError):
    """Inputs or parameters do not have the expected shapes."""

    def __init__(
        self,
        what: str,
        expected: Any,
        received: Any,
        error_code: str = "NET-SHAPE-MISMATCH-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            f"{what}: expected {expected}, got {received}",
            error_code,
            context=context,
            details={'what': what, 'expected': str(expected), 'received': str(received)}
        )


class StaleTapeError(NetworkError):
    """A forward tape does not belong to the parameters being differentiated."""

    def __init__(
        self,
        error_code: str = "NET-TAPE-STALE-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            "Forward tape was recorded with different parameters",
            error_code,
            context=context
        )
