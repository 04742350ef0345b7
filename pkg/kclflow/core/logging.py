"""
Logging utilities for kclflow.

Library modules only call ``logging.getLogger(__name__)``. The CLI installs
handlers once through ``configure_logging``; long runs such as ``repro`` can
additionally mirror their records into the run directory with ``run_log``.
"""

import logging
import os
from contextlib import contextmanager
from logging.handlers import RotatingFileHandler
from pathlib import Path
from typing import Iterator, Union

from .errors.base import ErrorContext, ErrorSeverity, ConfigurationError

# processName tells scenario-generation workers apart
FILE_FORMAT = "%(asctime)s - %(processName)s - %(name)s - %(levelname)s - %(message)s"
CONSOLE_FORMAT = "%(levelname)s - %(message)s"

# Global logger instance
_root_logger = None


def _as_level(level: Union[str, int]) -> int:
    if isinstance(level, int):
        return level
    value = logging.getLevelName(level.upper())
    if not isinstance(value, int):
        raise ValueError(f"Unknown log level: {level}")
    return value


def setup_logger(
    name: str,
    log_file: str,
    level: Union[str, int] = "INFO",
    max_size: int = 10 * 1024 * 1024,  # 10MB
    backup_count: int = 5
) -> logging.Logger:
    """
    Set up the root handlers once and return a named logger.

    Args:
        name: Logger name
        log_file: Path to the rotating log file
        level: Logging level name or number
        max_size: Maximum size of the log file before rotation in bytes
        backup_count: Number of rotated files to keep

    Returns:
        logging.Logger: Configured logger instance

    Raises:
        ConfigurationError: If the level is unknown or the log file cannot be opened
    """
    global _root_logger
    try:
        level = _as_level(level)

        if _root_logger is not None:
            child_logger = logging.getLogger(name)
            child_logger.setLevel(level)
            return child_logger

        log_dir = os.path.dirname(log_file)
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)

        file_handler = RotatingFileHandler(log_file, maxBytes=max_size, backupCount=backup_count)
        file_handler.setFormatter(logging.Formatter(FILE_FORMAT))

        console_handler = logging.StreamHandler()
        console_handler.setFormatter(logging.Formatter(CONSOLE_FORMAT))

        root = logging.getLogger()
        root.handlers = []
        root.setLevel(level)
        root.addHandler(file_handler)
        root.addHandler(console_handler)
        _root_logger = root

        child_logger = logging.getLogger(name)
        child_logger.setLevel(level)
        return child_logger

    except (OSError, ValueError) as e:
        error_context = ErrorContext(
            source="logging.setup_logger",
            severity=ErrorSeverity.ERROR,
            additional_data={
                "logger_name": name,
                "log_file": log_file,
                "error": str(e)
            }
        )
        raise ConfigurationError(
            message=f"Failed to setup logger: {str(e)}",
            error_code="LOG-SETUP-001",
            context=error_context
        ) from e


def configure_logging(settings, name: str = "management") -> logging.Logger:
    """``setup_logger`` driven by ``Settings.log_file`` and ``Settings.log_level``."""
    return setup_logger(name=name, log_file=settings.log_file, level=settings.log_level)


@contextmanager
def run_log(path: Union[str, Path], level: Union[str, int] = "INFO") -> Iterator[Path]:
    """Mirror every record emitted inside the block into ``path``."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(path, encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(
            message=f"Cannot open run log {path}: {e}",
            error_code="LOG-RUN-001",
            context=ErrorContext(source="logging.run_log", additional_data={"path": str(path)})
        ) from e
    handler.setLevel(_as_level(level))
    handler.setFormatter(logging.Formatter(FILE_FORMAT))
    root = logging.getLogger()
    root.addHandler(handler)
    try:
        yield path
    finally:
        root.removeHandler(handler)
        handler.close()


def reset_logging() -> None:
    """Forget the configured root logger (used by tests)."""
    global _root_logger
    if _root_logger is not None:
        for handler in list(_root_logger.handlers):
            handler.close()
        _root_logger.handlers = []
    _root_logger = None
