"""
Tests for logger setup and per-run log files.
"""

import logging

import pytest

from kclflow.config import Settings
from kclflow.core.errors.base import ConfigurationError
from kclflow.core.logging import configure_logging, run_log, setup_logger


def test_setup_logger_writes_to_file(temp_dir):
    log_file = temp_dir / "logs" / "kclflow.log"
    logger = setup_logger("tests.logging", str(log_file), level="debug")
    logger.info("solver converged")
    for handler in logging.getLogger().handlers:
        handler.flush()
    text = log_file.read_text(encoding="utf-8")
    assert "tests.logging - INFO - solver converged" in text
    assert "MainProcess" in text


def test_second_setup_returns_child_logger(temp_dir):
    setup_logger("first", str(temp_dir / "a.log"))
    handlers = list(logging.getLogger().handlers)
    child = setup_logger("second", str(temp_dir / "b.log"), level=logging.WARNING)
    assert child.name == "second"
    assert child.level == logging.WARNING
    assert logging.getLogger().handlers == handlers
    assert not (temp_dir / "b.log").exists()


def test_unknown_level_is_a_configuration_error(temp_dir):
    with pytest.raises(ConfigurationError) as exc_info:
        setup_logger("bad", str(temp_dir / "x.log"), level="LOUD")
    assert exc_info.value.error_code == "CFG-LOG-SETUP-001"


def test_configure_logging_from_settings(temp_dir):
    settings = Settings(testing=True, log_file=str(temp_dir / "cfg.log"), log_level="ERROR")
    logger = configure_logging(settings)
    assert logger.name == "management"
    assert logging.getLogger().level == logging.ERROR
    assert (temp_dir / "cfg.log").exists()


def test_run_log_mirrors_records_only_inside_block(temp_dir):
    setup_logger("run", str(temp_dir / "main.log"), level="INFO")
    logger = logging.getLogger("kclflow.tests")
    path = temp_dir / "run" / "repro.log"
    with run_log(path) as opened:
        assert opened == path
        logger.info("inside")
    logger.info("outside")
    text = path.read_text(encoding="utf-8")
    assert "inside" in text
    assert "outside" not in text
