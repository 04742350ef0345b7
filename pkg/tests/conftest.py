"""
Pytest configuration file for the kclflow tests.

This file contains shared fixtures: the checked-in IEEE cases, small
hand-built grids, settings in testing mode and temporary work directories.
"""

import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np
import pytest

# Add parent directory to Python path
sys.path.append(str(Path(__file__).parent.parent))

os.environ.update({
    "KCLFLOW_TESTING": "1",
    "KCLFLOW_LOG_LEVEL": "WARNING",
})

from kclflow.config import Settings, reset_settings
from kclflow.core.case_parser import fixture_path, lower_case, parse_case_file
from kclflow.core.grid_model import Branch, Bus, BusKind, Grid
from kclflow.core.logging import reset_logging


def make_grid(buses, branches, name="test"):
    """Build a Grid from (kind, p, q, vm) tuples and (from, to, r, x) tuples."""
    return Grid(
        buses=tuple(
            Bus(id=i, kind=kind, p=p, q=q, vm=vm)
            for i, (kind, p, q, vm) in enumerate(buses)
        ),
        branches=tuple(
            Branch(id=k, from_bus=f, to_bus=t, r=r, x=x)
            for k, (f, t, r, x) in enumerate(branches)
        ),
        name=name,
    )


@pytest.fixture(scope="session")
def grid14():
    """IEEE 14-bus case."""
    return lower_case(parse_case_file(fixture_path("case14")))


@pytest.fixture(scope="session")
def grid118():
    """IEEE 118-bus case."""
    return lower_case(parse_case_file(fixture_path("case118")))


@pytest.fixture(scope="session")
def two_bus():
    """Slack feeding one load over a single line."""
    return make_grid(
        [(BusKind.SLACK, 0.0, 0.0, 1.0), (BusKind.PQ, -0.5, -0.2, 1.0)],
        [(0, 1, 0.01, 0.1)],
        name="two_bus",
    )


@pytest.fixture(scope="session")
def star3():
    """Slack in the middle of two loads."""
    return make_grid(
        [(BusKind.SLACK, 0.0, 0.0, 1.02), (BusKind.PQ, -0.3, -0.1, 1.0), (BusKind.PQ, -0.4, -0.15, 1.0)],
        [(0, 1, 0.02, 0.08), (0, 2, 0.03, 0.1)],
        name="star3",
    )


@pytest.fixture(scope="session")
def triangle3():
    """Three buses on a loop: slack, generator and load."""
    return make_grid(
        [(BusKind.SLACK, 0.0, 0.0, 1.05), (BusKind.PV, 0.4, 0.0, 1.02), (BusKind.PQ, -0.6, -0.2, 1.0)],
        [(0, 1, 0.02, 0.06), (1, 2, 0.03, 0.09), (0, 2, 0.025, 0.08)],
        name="triangle3",
    )


@pytest.fixture(scope="session")
def mesh5():
    """Five buses with two loops and a pendant load."""
    return make_grid(
        [
            (BusKind.SLACK, 0.0, 0.0, 1.04),
            (BusKind.PV, 0.5, 0.0, 1.02),
            (BusKind.PQ, -0.45, -0.15, 1.0),
            (BusKind.PQ, -0.4, -0.05, 1.0),
            (BusKind.PQ, -0.6, -0.1, 1.0),
        ],
        [
            (0, 1, 0.02, 0.06),
            (0, 2, 0.08, 0.24),
            (1, 2, 0.06, 0.18),
            (1, 3, 0.06, 0.18),
            (2, 3, 0.01, 0.03),
            (3, 4, 0.08, 0.24),
        ],
        name="mesh5",
    )


@pytest.fixture
def test_settings():
    """Settings in testing mode."""
    return Settings(testing=True)


@pytest.fixture
def temp_dir():
    """Create a temporary directory for test files."""
    temp_dir = tempfile.mkdtemp()
    yield Path(temp_dir)
    shutil.rmtree(temp_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def reset_singletons():
    """Forget cached settings and logging handlers between tests."""
    reset_settings()
    yield
    reset_settings()
    reset_logging()
