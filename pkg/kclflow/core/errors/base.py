"""
Base Error Handling

Every kclflow error carries a code of the form ``DOMAIN-ENTITY-...-NUMBER``,
an exit-code category used by the CLI, an ``ErrorContext`` and optional
details and recovery hints. Errors log themselves when raised.
"""

from dataclasses import dataclass, asdict, field
from datetime import datetime, timezone

UTC = timezone.utc
from enum import Enum
from typing import Any, Dict, Optional, List
import logging
import re
import uuid

logger = logging.getLogger(__name__)

# Exit-code categories used by the CLI
EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4
EXIT_CATEGORIES = (EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO)

_CODE_PATTERN = re.compile(r"^[A-Za-z0-9]+(?:-[A-Za-z0-9]+)+-[0-9]+$")


class ErrorSeverity(str, Enum):
    """Severity levels for errors."""
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


@dataclass
class ErrorContext:
    """Where and when an error was raised."""
    source: str = ""
    severity: ErrorSeverity = ErrorSeverity.ERROR
    timestamp: datetime = field(default_factory=lambda: datetime.now(UTC))
    error_id: str = field(default_factory=lambda: str(uuid.uuid4()))
    additional_data: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['timestamp'] = self.timestamp.isoformat()
        data['severity'] = self.severity.value
        return data


def make_context(source: str, severity: ErrorSeverity = ErrorSeverity.ERROR, **data: Any) -> ErrorContext:
    """Build an ErrorContext for ``source`` carrying ``data`` as additional data."""
    return ErrorContext(source=source, severity=severity, additional_data=dict(data))


def with_prefix(domain: str, error_code: str) -> str:
    """Prepend ``DOMAIN-`` unless the code already starts with it."""
    prefix = f"{domain}-"
    return error_code if error_code.startswith(prefix) else prefix + error_code


class BaseError(Exception):
    """Base class for kclflow errors."""

    def __init__(
        self,
        message: str,
        error_code: str,
        exit_code: int = EXIT_VALIDATION,
        context: Optional[ErrorContext] = None,
        details: Optional[Dict[str, Any]] = None,
        suggestions: Optional[List[str]] = None
    ):
        """
        Args:
            message: Human-readable error message
            error_code: Unique error identifier (DOMAIN-ENTITY-SPECIFIC-NUMBER)
            exit_code: CLI exit category: 2 validation, 3 numerical, 4 I/O
            context: Error context (default: a fresh ErrorContext)
            details: Structured details for manifests and logs
            suggestions: Recovery hints printed by the CLI

        Raises:
            ValueError: If the code or exit category is malformed
        """
        if not _CODE_PATTERN.match(error_code):
            raise ValueError(
                f"Invalid error code format: {error_code}. "
                "Expected DOMAIN-ENTITY-SPECIFIC-NUMBER with alphanumeric parts"
            )
        if exit_code not in EXIT_CATEGORIES:
            raise ValueError(f"Exit code {exit_code} is not one of {EXIT_CATEGORIES}")

        super().__init__(message)
        self.message = message
        self.error_code = error_code
        self.exit_code = exit_code
        self.context = context or ErrorContext()
        self.details = details or {}
        self.suggestions = suggestions or []
        self._log_error()

    @property
    def domain(self) -> str:
        return self.error_code.split("-", 1)[0]

    def _log_error(self) -> None:
        log_message = (
            f"[{self.error_code}] {self.message} "
            f"(source={self.context.source}, severity={self.context.severity.value}, "
            f"error_id={self.context.error_id})"
        )
        if self.details:
            log_message += f" details={self.details}"

        level = getattr(logging, self.context.severity.value, logging.ERROR)
        logger.log(level, log_message)

    def to_dict(self) -> Dict[str, Any]:
        """Serializable form, as stored in failed run manifests."""
        return {
            'error_code': self.error_code,
            'message': self.message,
            'exit_code': self.exit_code,
            'context': self.context.to_dict(),
            'details': self.details,
            'suggestions': self.suggestions
        }

    def cli_lines(self) -> List[str]:
        """``[CODE] message`` followed by one hint line per suggestion."""
        return [str(self)] + [f"  hint: {s}" for s in self.suggestions]

    def add_suggestion(self, suggestion: str) -> None:
        self.suggestions.append(suggestion)

    def add_detail(self, key: str, value: Any) -> None:
        self.details[key] = value

    def set_severity(self, severity: ErrorSeverity) -> None:
        self.context.severity = severity

    def __str__(self) -> str:
        return f"[{self.error_code}] {self.message}"


class ConfigurationError(BaseError):
    """Settings, config files or logging cannot be set up."""

    def __init__(
        self,
        message: str,
        error_code: str,
        context: Optional[ErrorContext] = None
    ):
        super().__init__(message, with_prefix("CFG", error_code), exit_code=EXIT_VALIDATION, context=context)
