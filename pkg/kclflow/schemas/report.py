# kclflow/schemas/report.py

"""
Pydantic schemas for training logs, evaluation reports and repro summaries.
"""

from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from kclflow.schemas.dataset import Regime
from kclflow.version import __version__

_KCL_IDENTITY_TOL = 1e-12


def format_cell(mean: float, std: Optional[float], digits: int = 3) -> str:
    """Render ``mean (std)`` the way result tables print a cell."""
    if std is None:
        return f"{mean:.{digits}f}"
    return f"{mean:.{digits}f} ({std:.{digits}f})"


class EpochRecord(BaseModel):
    """Metrics logged at the end of one training epoch."""
    epoch: int = Field(..., ge=1)
    train_mse: float
    train_kcl: float
    val_mse: Optional[float] = None
    val_kcl: Optional[float] = None


class TrainLog(BaseModel):
    """Per-epoch history of one training run."""
    seed: int
    with_projection: bool
    initial_val_mse: Optional[float] = None
    epochs: List[EpochRecord] = Field(default_factory=list)

    @property
    def final(self) -> Optional[EpochRecord]:
        return self.epochs[-1] if self.epochs else None

    def max_train_kcl(self) -> float:
        return max((r.train_kcl for r in self.epochs), default=0.0)


class RunMetrics(BaseModel):
    """Test-set metrics of one trained model."""
    seed: int
    mse: float
    l_p: float
    l_q: float
    kcl_violation: float
    scenarios: int = Field(..., ge=1)

    @model_validator(mode="after")
    def check_kcl_identity(self) -> "RunMetrics":
        """kcl_violation is the mean of the active and reactive mismatch."""
        expected = 0.5 * (self.l_p + self.l_q)
        if abs(self.kcl_violation - expected) > _KCL_IDENTITY_TOL * max(1.0, abs(expected)):
            raise ValueError(f"kcl_violation {self.kcl_violation} != (l_p + l_q)/2 = {expected}")
        return self


class EvalReport(BaseModel):
    """Mean (and std over runs) of the test metrics."""
    model_config = ConfigDict(use_enum_values=True)

    version: str = __version__
    grid_name: str = ""
    topology_hash: str
    regime: Regime
    with_projection: bool
    runs: int = Field(..., ge=1)
    seeds: List[int]
    per_run: List[RunMetrics]
    mse: float
    l_p: float
    l_q: float
    kcl_violation: float
    mse_std: Optional[float] = None
    l_p_std: Optional[float] = None
    l_q_std: Optional[float] = None
    kcl_violation_std: Optional[float] = None
    config: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_runs(self) -> "EvalReport":
        if len(self.per_run) != self.runs or len(self.seeds) != self.runs:
            raise ValueError(f"Expected {self.runs} runs, got {len(self.per_run)} results")
        if self.runs > 1 and (self.mse_std is None or self.kcl_violation_std is None):
            raise ValueError("Std fields are required when runs > 1")
        return self

    def cells(self, digits: int = 3) -> Dict[str, str]:
        return {
            "mse": format_cell(self.mse, self.mse_std, digits),
            "kcl_violation": format_cell(self.kcl_violation, self.kcl_violation_std, digits),
        }


class SummaryRow(BaseModel):
    """One row of the repro summary: a model variant on one grid and regime."""
    grid: str
    model: str
    regime: Regime
    mse: str
    kcl_violation: str
    report: EvalReport


class ReproSummary(BaseModel):
    """Result tables produced by ``repro``."""
    version: str = __version__
    scale: str
    rows: List[SummaryRow] = Field(default_factory=list)

    def table(self) -> List[Dict[str, str]]:
        return [
            {
                "grid": row.grid,
                "model": row.model,
                "regime": Regime(row.regime).value,
                "mse": row.mse,
                "kcl_violation": row.kcl_violation,
            }
            for row in self.rows
        ]
