"""
Case Parser Error Handling

This module defines errors raised while reading case files.
"""

from typing import Optional, Dict, Any, List

from .base import BaseError, ErrorContext, ErrorSeverity, EXIT_VALIDATION, with_prefix


class CaseError(BaseError):
    """Base class for all case-ingest errors."""

    def __init__(
        self,
        message: str,
        error_code: str,
        context: Optional[ErrorContext] = None,
        details: Optional[Dict[str, Any]] = None,
        suggestions: Optional[List[str]] = None
    ):
        error_code = with_prefix("CASE", error_code)
        super().__init__(
            message,
            error_code,
            EXIT_VALIDATION,
            context,
            details,
            suggestions
        )


class CaseSyntaxError(CaseError):
    """A line of the case text cannot be parsed."""

    def __init__(
        self,
        message: str,
        line_number: int,
        error_code: str = "CASE-SYNTAX-LINE-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            f"line {line_number}: {message}",
            error_code,
            context=context,
            details={'line_number': line_number},
            suggestions=["Matrix rows must contain only numbers separated by whitespace"]
        )
        self.line_number = line_number


class MissingTableError(CaseError):
    """A required matrix (baseMVA, bus, gen, branch) is absent."""

    def __init__(
        self,
        table: str,
        error_code: str = "CASE-TABLE-MISSING-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            f"Case is missing the '{table}' table",
            error_code,
            context=context,
            details={'table': table}
        )
        self.table = table


class NoSlackError(CaseError):
    """No bus carries the slack type code."""

    def __init__(self, error_code: str = "CASE-SLACK-NONE-001", context: Optional[ErrorContext] = None):
        super().__init__("Case has no slack bus (type code 3)", error_code, context=context)


class MultipleSlackError(CaseError):
    """More than one bus carries the slack type code."""

    def __init__(
        self,
        bus_numbers: List[int],
        error_code: str = "CASE-SLACK-MULTI-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            f"Case has {len(bus_numbers)} slack buses: {bus_numbers}",
            error_code,
            context=context,
            details={'bus_numbers': bus_numbers}
        )
        self.bus_numbers = bus_numbers


class DanglingReferenceError(CaseError):
    """A gen or branch row references a bus number that does not exist."""

    def __init__(
        self,
        table: str,
        bus_number: int,
        error_code: str = "CASE-REF-DANGLING-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            f"'{table}' row references unknown bus {bus_number}",
            error_code,
            context=context,
            details={'table': table, 'bus_number': bus_number}
        )
        self.table = table
        self.bus_number = bus_number
        self.set_severity(ErrorSeverity.ERROR)
