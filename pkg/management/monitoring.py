"""
Run bookkeeping for the kclflow CLI.

Every command writes a manifest next to its output: the command line, a
settings snapshot, content hashes of inputs and outputs, seeds, per-stage
wall-clock durations and a short host description.
"""

import hashlib
import json
import logging
import platform
import time
from contextlib import contextmanager
from datetime import datetime, timezone

UTC = timezone.utc
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Union

import psutil
from colorama import Fore, Style, init as colorama_init
from pydantic import BaseModel, Field

from kclflow.core.errors.base import BaseError
from kclflow.core.errors.management import InsufficientDiskError, with_management_error_handling
from kclflow.schemas.report import ReproSummary
from kclflow.version import __version__

logger = logging.getLogger("management.monitoring")

_CHUNK = 1 << 20


class ArtifactRecord(BaseModel):
    """A file consumed or produced by a command."""
    path: str
    sha256: str
    bytes: int


class RunManifest(BaseModel):
    """Provenance record of one CLI invocation."""
    command: str
    argv: List[str] = Field(default_factory=list)
    tool_version: str = __version__
    started_at: str = Field(default_factory=lambda: datetime.now(UTC).isoformat())
    config: Dict[str, Any] = Field(default_factory=dict)
    seeds: Dict[str, int] = Field(default_factory=dict)
    inputs: List[ArtifactRecord] = Field(default_factory=list)
    outputs: List[ArtifactRecord] = Field(default_factory=list)
    durations: Dict[str, float] = Field(default_factory=dict)
    timings: Dict[str, float] = Field(default_factory=dict)
    host: Dict[str, Any] = Field(default_factory=dict)
    status: str = "running"
    error: Optional[Dict[str, Any]] = None


def file_sha256(path: Union[str, Path]) -> str:
    """Hex SHA-256 of a file's contents."""
    digest = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(_CHUNK), b""):
            digest.update(chunk)
    return digest.hexdigest()


def artifact_record(path: Union[str, Path]) -> ArtifactRecord:
    path = Path(path)
    return ArtifactRecord(path=str(path), sha256=file_sha256(path), bytes=path.stat().st_size)


def disk_usage(path: Union[str, Path] = ".") -> Dict[str, float]:
    """Disk usage of the filesystem holding ``path``, in MB."""
    usage = psutil.disk_usage(str(path))
    return {
        "total_mb": round(usage.total / (1024 ** 2), 1),
        "free_mb": round(usage.free / (1024 ** 2), 1),
        "percent_used": usage.percent,
    }


def check_disk_space(path: Union[str, Path], required_mb: float) -> float:
    """Return free MB under ``path``; raise InsufficientDiskError below ``required_mb``."""
    existing = Path(path)
    while not existing.exists() and existing != existing.parent:
        existing = existing.parent
    free_mb = psutil.disk_usage(str(existing)).free / (1024 ** 2)
    if free_mb < required_mb:
        raise InsufficientDiskError(str(path), free_mb, required_mb)
    return free_mb


def host_info() -> Dict[str, Any]:
    memory = psutil.virtual_memory()
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "cpu_count": psutil.cpu_count(),
        "memory_gb": round(memory.total / (1024 ** 3), 2),
    }


class RunRecorder:
    """Collects manifest entries while a command runs."""

    def __init__(self, command: str, argv: Optional[List[str]] = None, config: Optional[Dict[str, Any]] = None):
        self.manifest = RunManifest(
            command=command,
            argv=list(argv or []),
            config=dict(config or {}),
            host=host_info(),
        )

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        """Time a named stage."""
        started = time.perf_counter()
        logger.info("Stage '%s' started", name)
        try:
            yield
        finally:
            elapsed = time.perf_counter() - started
            self.manifest.durations[name] = self.manifest.durations.get(name, 0.0) + elapsed
            logger.info("Stage '%s' finished in %.2fs", name, elapsed)

    def add_input(self, path: Union[str, Path]) -> ArtifactRecord:
        record = artifact_record(path)
        self.manifest.inputs.append(record)
        return record

    def add_output(self, path: Union[str, Path]) -> ArtifactRecord:
        record = artifact_record(path)
        self.manifest.outputs.append(record)
        return record

    def seed(self, name: str, value: int) -> None:
        self.manifest.seeds[name] = int(value)

    def fail(self, error: BaseException) -> None:
        self.manifest.status = "failed"
        if isinstance(error, BaseError):
            self.manifest.error = {"error_code": error.error_code, "message": error.message}
        else:
            self.manifest.error = {"error_code": type(error).__name__, "message": str(error)}

    def finish(self, path: Union[str, Path]) -> Path:
        if self.manifest.status == "running":
            self.manifest.status = "ok"
        return save_manifest(self.manifest, path)


def manifest_path_for(output: Union[str, Path]) -> Path:
    """``<output>.manifest.json`` beside a produced artifact."""
    output = Path(output)
    return output.with_name(output.name + ".manifest.json")


@with_management_error_handling
def save_manifest(manifest: RunManifest, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    logger.info("Wrote manifest %s", path)
    return path


def load_manifest(path: Union[str, Path]) -> RunManifest:
    return RunManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))


def _colour_kcl(cell: str, with_projection: bool) -> str:
    colour = Fore.GREEN if with_projection else Fore.YELLOW
    return f"{colour}{cell}{Style.RESET_ALL}"


def print_summary(summary: ReproSummary) -> None:
    """Print the repro result table."""
    colorama_init()
    print(f"\n{Style.BRIGHT}=== kclflow results ({summary.scale} scale) ==={Style.RESET_ALL}")
    header = f"{'grid':<10} {'model':<10} {'regime':<7} {'MSE':<18} {'KCL violation':<18}"
    print(header)
    print("-" * len(header))
    for row, cells in zip(summary.rows, summary.table()):
        kcl = _colour_kcl(f"{cells['kcl_violation']:<18}", row.report.with_projection)
        print(f"{cells['grid']:<10} {cells['model']:<10} {cells['regime']:<7} {cells['mse']:<18} {kcl}")
    print()


def print_json(data: Any) -> None:
    print(json.dumps(data, indent=2, default=str))
