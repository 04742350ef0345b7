"""
Errors raised by the kclflow CLI around the numerical core: bad command
input, missing case fixtures, unreadable or unwritable artifacts and a full
work directory.
"""

from functools import wraps
from typing import Optional, Dict, Any, List

from .base import (
    BaseError, ErrorContext, ErrorSeverity, EXIT_IO, EXIT_VALIDATION, make_context, with_prefix,
)


class ManagementError(BaseError):
    """Base class for all management-related errors"""
    def __init__(
        self,
        message: str,
        error_code: str,
        exit_code: int = EXIT_VALIDATION,
        context: Optional[ErrorContext] = None,
        details: Optional[Dict[str, Any]] = None,
        suggestions: Optional[List[str]] = None
    ):
        error_code = with_prefix("MGT", error_code)
        context = context or make_context("management", **(details or {}))
        super().__init__(message, error_code, exit_code, context, details, suggestions)


class CommandError(ManagementError):
    """Error raised for command execution issues"""
    def __init__(
        self,
        message: str,
        command: Optional[str] = None,
        error_code: str = "MGT-COMMAND-GENERAL-001",
        context: Optional[ErrorContext] = None
    ):
        additional_data = {"command": command} if command is not None else {}
        super().__init__(
            message,
            error_code=error_code,
            context=context,
            details=additional_data
        )
        self.command = command


class FixtureMissingError(ManagementError):
    """Error raised when a checked-in case fixture cannot be found"""
    def __init__(
        self,
        path: str,
        error_code: str = "MGT-FIXTURE-MISSING-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            f"Case fixture not found: {path}",
            error_code=error_code,
            exit_code=EXIT_IO,
            context=context,
            details={"path": path}
        )
        self.path = path


class InsufficientDiskError(ManagementError):
    """Error raised when the work directory lacks free space"""
    def __init__(
        self,
        path: str,
        free_mb: float,
        required_mb: float,
        error_code: str = "MGT-DISK-LOW-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            f"Only {free_mb:.0f} MB free under {path}, {required_mb:.0f} MB required",
            error_code=error_code,
            exit_code=EXIT_IO,
            context=context,
            details={"path": path, "free_mb": free_mb, "required_mb": required_mb},
            suggestions=["Free disk space", "Lower KCLFLOW_MIN_FREE_DISK_MB"]
        )


class ArtifactIOError(ManagementError):
    """Error raised when an input or output artifact cannot be read or written"""
    def __init__(
        self,
        message: str,
        path: Optional[str] = None,
        error_code: str = "MGT-ARTIFACT-IO-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            message,
            error_code=error_code,
            exit_code=EXIT_IO,
            context=context,
            details={"path": path} if path is not None else {}
        )
        self.path = path


def with_management_error_handling(func):
    """Turn stray exceptions of a command into kclflow errors.

    kclflow errors pass through. ``OSError`` becomes ``ArtifactIOError``
    (exit 4) and anything else ``MGT-GENERAL-UNEXPECTED-001``.
    """

    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except BaseError:
            raise
        except OSError as exc:
            path = getattr(exc, "filename", None)
            raise ArtifactIOError(
                str(exc),
                path=None if path is None else str(path),
                context=make_context("management", function=func.__name__, error=str(exc)),
            ) from exc
        except Exception as exc:
            raise ManagementError(
                str(exc),
                error_code="MGT-GENERAL-UNEXPECTED-001",
                context=make_context(
                    "management", ErrorSeverity.CRITICAL, function=func.__name__, error=str(exc)
                ),
            ) from exc

    return wrapper
