"""
KCL Projection Error Handling
"""

from typing import Optional, Tuple

from .base import BaseError, ErrorContext, EXIT_VALIDATION


class DimMismatchError(BaseError):
    """A flow or injection vector does not match the constraint system."""

    def __init__(
        self,
        what: str,
        expected: Tuple[int, ...],
        received: Tuple[int, ...],
        error_code: str = "KCL-DIM-MISMATCH-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            f"{what}: expected shape {expected}, got {received}",
            error_code,
            EXIT_VALIDATION,
            context,
            details={'what': what, 'expected': list(expected), 'received': list(received)}
        )
        self.expected = expected
        self.received = received
