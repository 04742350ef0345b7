# kclflow/schemas/checkpoint.py

"""
Schemas for training configuration and checkpoint metadata.
"""

from typing import Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator

from kclflow.schemas.dataset import NormalizationStats
from kclflow.version import __version__


class TrainConfig(BaseModel):
    """Optimizer, loop and architecture settings of one training run."""
    model_config = ConfigDict(frozen=True)

    lr: float = Field(1e-3, ge=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(1e-4, ge=0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(200, ge=1)
    seed: int = 0
    with_projection: bool = True
    grad_clip: Optional[float] = Field(None, gt=0)
    hidden_dim: int = Field(64, ge=1)
    heads: int = Field(4, ge=1)
    attention_dim: int = Field(64, ge=1)
    leaky_slope: float = Field(0.01, ge=0)

    @field_validator("betas")
    def validate_betas(cls, v):
        """Both moment decay rates must lie in [0, 1)."""
        if not all(0.0 <= b < 1.0 for b in v):
            raise ValueError(f"betas must lie in [0, 1), got {v}")
        return v

    @classmethod
    def from_settings(cls, settings, **overrides) -> "TrainConfig":
        values = dict(
            lr=settings.learning_rate,
            betas=(settings.beta1, settings.beta2),
            eps=settings.adam_eps,
            weight_decay=settings.weight_decay,
            batch_size=settings.batch_size,
            epochs=settings.epochs,
            grad_clip=settings.grad_clip,
            hidden_dim=settings.hidden_dim,
            heads=settings.attention_heads,
            attention_dim=settings.attention_dim,
            leaky_slope=settings.leaky_slope,
        )
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


class CheckpointMeta(BaseModel):
    """JSON metadata stored next to the weight arrays of a checkpoint."""
    version: str = __version__
    hidden_dim: int
    heads: int
    attention_dim: int
    leaky_slope: float
    normalization: NormalizationStats
    config: TrainConfig
    grid_hash: str = ""
    data_hash: str = ""
    train_data_path: Optional[str] = None
