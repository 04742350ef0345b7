# kclflow/config.py

"""
Configuration settings for kclflow using Pydantic's BaseSettings.

Every numerical default of the pipeline lives here so that run manifests
and report headers can snapshot it. Values come from (highest first)
explicit keyword arguments, ``KCLFLOW_*`` environment variables, a ``.env``
file, and the defaults below.
"""

import logging
from typing import Dict, Optional, Tuple

from dotenv import dotenv_values
from pydantic import Field, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from kclflow.core.errors.base import ErrorContext, ErrorSeverity, ConfigurationError

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Application settings."""
    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="KCLFLOW_",
        case_sensitive=False,
        extra="ignore"
    )

    # Newton-Raphson oracle
    solver_tol: float = Field(default=1e-8, gt=0)
    solver_max_iter: int = Field(default=20, ge=1)

    # Scenario sampling
    sampling_spread: float = Field(default=0.01, gt=0)
    spread_is_variance: bool = True
    vm_clip_min: float = Field(default=0.8, gt=0)
    vm_clip_max: float = Field(default=1.2, gt=0)
    max_attempts_per_scenario: int = Field(default=10, ge=1)
    split_fractions: Tuple[float, float, float] = (0.8, 0.1, 0.1)

    # Projection
    svd_rtol: float = Field(default=1e-10, gt=0)
    kaczmarz_tol: float = Field(default=1e-6, gt=0)

    # Surrogate network
    hidden_dim: int = Field(default=64, ge=1)
    attention_heads: int = Field(default=4, ge=1)
    attention_dim: int = Field(default=64, ge=1)
    leaky_slope: float = Field(default=0.01, ge=0)

    # Training
    learning_rate: float = Field(default=1e-3, ge=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    weight_decay: float = Field(default=1e-4, ge=0)
    batch_size: int = Field(default=32, ge=1)
    epochs: int = Field(default=200, ge=1)
    grad_clip: Optional[float] = Field(default=None, gt=0)
    runs: int = Field(default=3, ge=1)

    # Execution
    workers: int = Field(default=1, ge=1)
    min_free_disk_mb: float = Field(default=200.0, ge=0)
    # Manifests of commands whose result goes to stdout
    manifest_dir: str = "runs/manifests"

    # Logging
    log_level: str = Field(
        default="INFO",
        pattern="^(DEBUG|INFO|WARNING|ERROR|CRITICAL)$"
    )
    log_file: str = "logs/kclflow.log"

    # Testing mode
    testing: bool = False

    @field_validator("log_level", mode="before")
    def normalize_log_level(cls, v: str) -> str:
        """Accept lower-case level names."""
        return v.upper() if isinstance(v, str) else v

    @property
    def sampling_std(self) -> float:
        """Standard deviation implied by the sampling spread."""
        if self.spread_is_variance:
            return self.sampling_spread ** 0.5
        return self.sampling_spread

    def validate_settings(self, force: bool = False) -> None:
        """Validate cross-field consistency.

        Args:
            force: If True, validate settings even in testing mode.
        """
        if not force and self.testing:
            return

        if self.vm_clip_min >= self.vm_clip_max:
            raise ConfigurationError(
                message=f"vm_clip_min ({self.vm_clip_min}) must be below vm_clip_max ({self.vm_clip_max})",
                error_code="CFG-SAMPLE-CLIP-001",
                context=ErrorContext(
                    source="config.Settings.validate_settings",
                    severity=ErrorSeverity.ERROR,
                    additional_data={"vm_clip_min": self.vm_clip_min, "vm_clip_max": self.vm_clip_max}
                )
            )

        if any(f < 0 for f in self.split_fractions) or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ConfigurationError(
                message=f"split_fractions must be non-negative and sum to 1, got {self.split_fractions}",
                error_code="CFG-SPLIT-SUM-001",
                context=ErrorContext(
                    source="config.Settings.validate_settings",
                    severity=ErrorSeverity.ERROR,
                    additional_data={"split_fractions": list(self.split_fractions)}
                )
            )

    def __init__(self, **kwargs):
        """Initialize settings with environment variables."""
        super().__init__(**kwargs)

        # Don't validate settings in testing mode unless forced
        if not self.testing:
            self.validate_settings()


def read_config_file(path: str) -> Dict[str, str]:
    """Read a ``key=value`` config file, dropping keys without a value.

    Keys are lower-cased so ``LEARNING_RATE=1e-3`` and ``learning_rate=1e-3``
    are equivalent.
    """
    values = dotenv_values(path)
    return {key.lower(): value for key, value in values.items() if value is not None}


# Global settings instance
_settings = None


def get_settings() -> Settings:
    """Get application settings singleton."""
    global _settings
    if _settings is None:
        try:
            _settings = Settings()
        except ConfigurationError:
            raise
        except Exception as e:
            error_context = ErrorContext(
                source="config.get_settings",
                severity=ErrorSeverity.CRITICAL,
                additional_data={"error": str(e)}
            )
            raise ConfigurationError(
                message="Failed to load kclflow settings",
                error_code="LOAD-001",
                context=error_context
            ) from e
    return _settings


def reset_settings() -> None:
    """Drop the cached settings singleton."""
    global _settings
    _settings = None
