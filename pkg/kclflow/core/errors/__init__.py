"""
Error handling package initialization.

This module exposes all error classes for kclflow.
"""

# Import base errors first
from .base import (
    BaseError,
    ErrorContext,
    ErrorSeverity,
    ConfigurationError,
    make_context,
    with_prefix,
    EXIT_OK,
    EXIT_VALIDATION,
    EXIT_NUMERICAL,
    EXIT_IO,
)

# Import grid errors
from .grid import (
    GridError,
    GridValidationError,
    SlackAdjacentError,
    WouldIslandError,
    IsolatedBusError,
)

# Import case parser errors
from .parser import (
    CaseError,
    CaseSyntaxError,
    MissingTableError,
    NoSlackError,
    MultipleSlackError,
    DanglingReferenceError,
)

# Import solver errors
from .solver import (
    SolverError,
    ZeroImpedanceError,
    DivergedError,
    SingularJacobianError,
)

from .projection import DimMismatchError
from .surrogate import NetworkError, ShapeMismatchError, StaleTapeError

# Import training errors
from .training import (
    TrainingError,
    TooManyDivergencesError,
    EmptySplitError,
    NonFiniteLossError,
    TopologyMismatchError,
)

# Import management errors
from .management import (
    ManagementError,
    CommandError,
    FixtureMissingError,
    InsufficientDiskError,
    ArtifactIOError,
    with_management_error_handling,
)

__all__ = [
    # Base errors
    'BaseError',
    'ErrorContext',
    'ErrorSeverity',
    'ConfigurationError',
    'make_context',
    'with_prefix',
    'EXIT_OK',
    'EXIT_VALIDATION',
    'EXIT_NUMERICAL',
    'EXIT_IO',

    # Grid errors
    'GridError',
    'GridValidationError',
    'SlackAdjacentError',
    'WouldIslandError',
    'IsolatedBusError',

    # Case errors
    'CaseError',
    'CaseSyntaxError',
    'MissingTableError',
    'NoSlackError',
    'MultipleSlackError',
    'DanglingReferenceError',

    # Solver errors
    'SolverError',
    'ZeroImpedanceError',
    'DivergedError',
    'SingularJacobianError',

    # Projection / network errors
    'DimMismatchError',
    'NetworkError',
    'ShapeMismatchError',
    'StaleTapeError',

    # Training errors
    'TrainingError',
    'TooManyDivergencesError',
    'EmptySplitError',
    'NonFiniteLossError',
    'TopologyMismatchError',

    # Management errors
    'ManagementError',
    'CommandError',
    'FixtureMissingError',
    'InsufficientDiskError',
    'ArtifactIOError',
    'with_management_error_handling',
]
