# kclflow/schemas/dataset.py

"""
Pydantic schemas for scenario datasets.

A dataset file is JSON-lines: one ``DatasetHeader`` line followed by one
``Scenario`` per line. Floats are serialised with their shortest round-trip
representation, so reloading a file reproduces every value bit for bit.
"""

from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from kclflow.core.errors.training import TrainingError
from kclflow.version import __version__


class Regime(str, Enum):
    """Operating regime of a dataset."""
    N = "n"
    N1 = "n1"


class SplitTag(str, Enum):
    """Dataset split of a scenario."""
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class SamplingConfig(BaseModel):
    """Parameters that determine how scenarios are drawn and solved."""
    model_config = ConfigDict(frozen=True)

    spread: float = Field(0.01, gt=0)
    spread_is_variance: bool = True
    vm_clip_min: float = Field(0.8, gt=0)
    vm_clip_max: float = Field(1.2, gt=0)
    max_attempts: int = Field(10, ge=1)
    solver_tol: float = Field(1e-8, gt=0)
    solver_max_iter: int = Field(20, ge=1)

    @property
    def std(self) -> float:
        """Standard deviation of the per-bus normal draws."""
        return self.spread ** 0.5 if self.spread_is_variance else self.spread

    @classmethod
    def from_settings(cls, settings) -> "SamplingConfig":
        return cls(
            spread=settings.sampling_spread,
            spread_is_variance=settings.spread_is_variance,
            vm_clip_min=settings.vm_clip_min,
            vm_clip_max=settings.vm_clip_max,
            max_attempts=settings.max_attempts_per_scenario,
            solver_tol=settings.solver_tol,
            solver_max_iter=settings.solver_max_iter,
        )


class NormalizationStats(BaseModel):
    """Per-feature z-score statistics for node features and edge attributes."""
    model_config = ConfigDict(frozen=True)

    node_mean: Tuple[float, float, float]
    node_std: Tuple[float, float, float]
    edge_mean: Tuple[float, float]
    edge_std: Tuple[float, float]

    @field_validator("node_std", "edge_std")
    def validate_std(cls, v):
        """Standard deviations must be strictly positive."""
        if any(s <= 0 for s in v):
            raise TrainingError(
                message=f"Normalization std must be positive, got {v}",
                error_code="TRAIN-STATS-STD-001"
            )
        return v

    def normalize_nodes(self, x: np.ndarray) -> np.ndarray:
        return (x - np.asarray(self.node_mean)) / np.asarray(self.node_std)

    def normalize_edges(self, e: np.ndarray) -> np.ndarray:
        return (e - np.asarray(self.edge_mean)) / np.asarray(self.edge_std)


class DatasetHeader(BaseModel):
    """First line of a dataset file."""
    version: str = __version__
    topology_hash: str
    grid_name: str = ""
    n_bus: int = Field(..., ge=1)
    n_branch: int = Field(..., ge=0)
    regime: Regime
    seed: int
    count: int = Field(..., ge=0)
    sampling: SamplingConfig
    edge_mean: Tuple[float, float]
    edge_std: Tuple[float, float]
    normalization: Optional[NormalizationStats] = None
    split_seed: Optional[int] = None
    split_fractions: Optional[Tuple[float, float, float]] = None
    attempts: int = 0


class Scenario(BaseModel):
    """One solved operating point with its labels."""
    index: int = Field(..., ge=0)
    grid_ref: str
    removed_branch: Optional[int] = None
    seed: int
    attempts: int = Field(1, ge=1)
    node_inputs: List[Tuple[float, float, float]]
    target_flows: List[float]
    net_p: List[float]
    net_q: List[float]
    split: Optional[SplitTag] = None

    def node_array(self) -> np.ndarray:
        return np.asarray(self.node_inputs, dtype=float)

    def flows_array(self) -> np.ndarray:
        return np.asarray(self.target_flows, dtype=float)

    def net_p_array(self) -> np.ndarray:
        return np.asarray(self.net_p, dtype=float)

    def net_q_array(self) -> np.ndarray:
        return np.asarray(self.net_q, dtype=float)
