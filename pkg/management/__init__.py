"""
Management package for kclflow.

This package provides the command-line surface of the toolkit:
- Sub-command parsing and dispatch (import, generate, solve, project, train, eval, repro)
- Settings resolution from flags, key=value config files and the environment
- Run manifests with content hashes, seeds and stage timings
- Disk checks and result summaries
"""

from .main import main, build_parser
from .commands import dispatch, load_settings, resolve_grid, run_repro
from .monitoring import RunManifest, RunRecorder, check_disk_space, file_sha256

from kclflow.core.errors.management import (
    ManagementError,
    CommandError,
    FixtureMissingError,
    InsufficientDiskError,
    ArtifactIOError,
    with_management_error_handling as with_error_handling,
)
from kclflow.version import __version__

__all__ = [
    'main',
    'build_parser',
    'dispatch',
    'load_settings',
    'resolve_grid',
    'run_repro',
    'RunManifest',
    'RunRecorder',
    'check_disk_space',
    'file_sha256',
    'ManagementError',
    'CommandError',
    'FixtureMissingError',
    'InsufficientDiskError',
    'ArtifactIOError',
    'with_error_handling',
    '__version__',
]
