"""
Dataset and Training Error Handling
"""

from typing import Optional, Dict, Any, List

from .base import BaseError, ErrorContext, ErrorSeverity, EXIT_NUMERICAL, EXIT_VALIDATION, with_prefix


class TrainingError(BaseError):
    """Base class for dataset and training errors."""

    def __init__(
        self,
        message: str,
        error_code: str,
        exit_code: int = EXIT_VALIDATION,
        context: Optional[ErrorContext] = None,
        details: Optional[Dict[str, Any]] = None,
        suggestions: Optional[List[str]] = None
    ):
        error_code = with_prefix("TRAIN", error_code)
        super().__init__(message, error_code, exit_code, context, details, suggestions)


class TooManyDivergencesError(TrainingError):
    """Scenario generation ran out of attempts."""

    def __init__(
        self,
        index: int,
        attempts: int,
        error_code: str = "TRAIN-GEN-DIVERGED-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            f"Scenario {index} diverged on all {attempts} attempts",
            error_code,
            exit_code=EXIT_NUMERICAL,
            context=context,
            details={'index': index, 'attempts': attempts},
            suggestions=["Reduce the sampling spread", "Use spread_is_variance=False"]
        )
        self.index = index
        self.attempts = attempts


class EmptySplitError(TrainingError):
    """A split with a positive fraction received no scenario."""

    def __init__(
        self,
        split: str,
        error_code: str = "TRAIN-SPLIT-EMPTY-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            f"Split '{split}' is empty",
            error_code,
            context=context,
            details={'split': split}
        )
        self.split = split
        self.set_severity(ErrorSeverity.WARNING)


class NonFiniteLossError(TrainingError):
    """The training loss became NaN or infinite."""

    def __init__(
        self,
        epoch: int,
        batch: int,
        loss: float,
        error_code: str = "TRAIN-LOSS-NONFINITE-001",
        context: Optional[ErrorContext] = None
    ):
        super().__init__(
            f"Non-finite loss {loss} at epoch {epoch}, batch {batch}",
            error_code,
            exit_code=EXIT_NUMERICAL,
            context=context,
            details={'epoch': epoch, 'batch': batch, 'loss': repr(loss)},
            suggestions=["Lower the learning rate", "Enable grad_clip"]
        )
        self.epoch = epoch
        self.batch = batch


class TopologyMismatchError(TrainingError):
    """Checkpoint and dataset disagree on normalization or topology."""

    def __init__(
        self,
        message: str,
        error_code: str = "TRAIN-EVAL-TOPOLOGY-001",
        context: Optional[ErrorContext] = None,
        details: Optional[Dict[str, Any]] = None
    ):
        super().__init__(message, error_code, context=context, details=details)
