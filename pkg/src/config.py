"""
Configuration Management
========================

Two layers:

* ``Settings`` - process-level knobs (log level, worker threads) read
  from ``QUAKEGRID_*`` environment variables and an optional ``.env`` file.
* ``RunConfig`` - one experiment, stored as a flat ``key=value`` text file.
  Unknown keys are rejected; ``to_text()`` and ``from_text()`` round-trip.
"""

from __future__ import annotations

import hashlib
import logging
import os
from datetime import date
from enum import Enum
from functools import lru_cache
from io import StringIO
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Mapping, Optional

from dotenv import dotenv_values, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.exceptions import ConfigError
from src.models import (
    GridSpec,
    LabelSpec,
    ModelConfig,
    RtlParams,
    SynthConfig,
    TrainConfig,
)

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = [0.0001, 0.1, 0.3, 0.5, 0.9, 0.99]
DEFAULT_SWEEP_WEIGHTS = [1.0, 10.0, 1e3, 1e5, 1e7]


# =============================================================================
# PROCESS SETTINGS
# =============================================================================

class LogLevel(str, Enum):
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"


class Settings(BaseModel):
    """Process-level settings."""

    log_level: LogLevel = LogLevel.INFO
    threads: int = -1

    @field_validator("threads")
    @classmethod
    def _threads(cls, value: int) -> int:
        if value == 0 or value < -1:
            raise ValueError("threads must be -1 (all cores) or a positive count")
        return value


@lru_cache()
def get_settings() -> Settings:
    """Load settings once from the environment (and .env when present)."""
    load_dotenv()
    values = {}
    for field in Settings.model_fields:
        env_value = os.environ.get(f"QUAKEGRID_{field.upper()}")
        if env_value is not None:
            values[field] = env_value
    return Settings(**values)


# =============================================================================
# EXPERIMENT CONFIG
# =============================================================================

def _none_if_blank(value):
    if isinstance(value, str) and value.strip().lower() in ("", "none", "null"):
        return None
    return value


class RunConfig(BaseModel):
    """
    Flat experiment configuration.

    Every key maps onto one field of a component config; the component views
    (``grid_spec()``, ``label_spec()``, ...) re-validate the invariants.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    # paths
    catalog_path: Optional[str] = None
    work_dir: str = "runs/default"

    # grid
    origin_lat: float = 30.0
    origin_lon: float = 130.0
    cell_km: float = 10.0
    n_rows: int = 16
    n_cols: int = 16
    ref_lat: float = 35.0

    # labels
    t_min_days: int = 10
    t_max_days: int = 50
    mag_threshold: float = 3.5

    # chronological split
    train_fraction: float = 0.7
    val_fraction: float = 0.1
    test_fraction: float = 0.2

    # prior
    prior_alpha: float = Field(1.0, gt=0.0)
    prior_c: float = 0.0
    prior_mode: Literal["additive", "scaled"] = "additive"

    # rtl
    rtl_r0: float = 50.0
    rtl_t0: float = 100.0
    rtl_r_max: Optional[float] = None
    rtl_t_max: Optional[float] = None
    rtl_m_min: float = 0.0
    rtl_eps_km: float = 1.0
    rtl_standardize: bool = False
    indicator_days: int = Field(0, ge=0)

    # model
    variant: Literal["cnn", "cnn_lstm"] = "cnn_lstm"
    use_prior_residual: bool = True
    embed_channels: int = 16
    hidden_channels: int = 32
    window_days: int = 30
    kernel_size: int = 3
    embed_depth: int = 1
    head_depth: int = 2
    activation: Literal["relu", "tanh"] = "relu"
    forget_bias: float = 1.0

    # training
    minor_class_weight: float = 1000.0
    major_class_weight: float = 1.0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 8
    patience: Optional[int] = 3
    grad_clip: Optional[float] = None

    # evaluation
    thresholds: List[float] = Field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    sweep_weights: List[float] = Field(default_factory=lambda: list(DEFAULT_SWEEP_WEIGHTS))

    # synthetic catalogs
    synth_start_day: date = date(2000, 1, 1)
    synth_days: int = 2000
    synth_background_rate: float = 0.002
    synth_b_value: float = 1.0
    synth_m_min: float = 2.0
    synth_precursor_mag: float = 3.0
    synth_mainshock_mag: float = 5.5
    synth_lag_days: int = 15
    synth_pair_rate: float = 0.0005
    synth_pair_count: Optional[int] = None

    seed: int = 0

    @field_validator(
        "catalog_path", "rtl_r_max", "rtl_t_max", "patience", "grad_clip", "synth_pair_count",
        mode="before",
    )
    @classmethod
    def _blank_to_none(cls, value):
        return _none_if_blank(value)

    @field_validator("thresholds", "sweep_weights", mode="before")
    @classmethod
    def _split_list(cls, value):
        if isinstance(value, str):
            return [float(item) for item in value.split(",") if item.strip()]
        return value

    @model_validator(mode="after")
    def _check_components(self) -> "RunConfig":
        fractions = (self.train_fraction, self.val_fraction, self.test_fraction)
        if min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
            raise ValueError("split fractions must be non-negative and sum to 1")
        # Build every component once so their invariants surface at load time.
        self.grid_spec()
        self.label_spec()
        self.rtl_params()
        self.network_config()
        self.train_config()
        return self

    # -------------------------------------------------------------------------
    # component views
    # -------------------------------------------------------------------------

    def grid_spec(self) -> GridSpec:
        return GridSpec(
            origin_lat=self.origin_lat, origin_lon=self.origin_lon, cell_km=self.cell_km,
            n_rows=self.n_rows, n_cols=self.n_cols, ref_lat=self.ref_lat,
        )

    def label_spec(self) -> LabelSpec:
        return LabelSpec(
            t_min_days=self.t_min_days, t_max_days=self.t_max_days,
            mag_threshold=self.mag_threshold,
        )

    def rtl_params(self) -> RtlParams:
        return RtlParams(
            r0=self.rtl_r0, t0=self.rtl_t0, r_max=self.rtl_r_max, t_max=self.rtl_t_max,
            m_min=self.rtl_m_min, eps_km=self.rtl_eps_km, standardize=self.rtl_standardize,
        )

    def network_config(self) -> ModelConfig:
        return ModelConfig(
            variant=self.variant, use_prior_residual=self.use_prior_residual,
            embed_channels=self.embed_channels, hidden_channels=self.hidden_channels,
            window_days=self.window_days, kernel_size=self.kernel_size,
            embed_depth=self.embed_depth, head_depth=self.head_depth,
            activation=self.activation, prior_c=self.prior_c, prior_mode=self.prior_mode,
            forget_bias=self.forget_bias,
            seed=self.seed,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            minor_class_weight=self.minor_class_weight,
            major_class_weight=self.major_class_weight,
            learning_rate=self.learning_rate, beta1=self.beta1, beta2=self.beta2,
            adam_eps=self.adam_eps, epochs=self.epochs, batch_size=self.batch_size,
            patience=self.patience, grad_clip=self.grad_clip, seed=self.seed,
        )

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            grid=self.grid_spec(), start_day=self.synth_start_day, days=self.synth_days,
            background_rate=self.synth_background_rate, b_value=self.synth_b_value,
            m_min=self.synth_m_min, precursor_mag=self.synth_precursor_mag,
            mainshock_mag=self.synth_mainshock_mag, lag_days=self.synth_lag_days,
            pair_rate=self.synth_pair_rate, pair_count=self.synth_pair_count,
            labels=self.label_spec(), seed=self.seed,
        )

    @property
    def split_fractions(self):
        return (self.train_fraction, self.val_fraction, self.test_fraction)

    # -------------------------------------------------------------------------
    # text round-trip
    # -------------------------------------------------------------------------

    @classmethod
    def from_mapping(cls, values: Mapping[str, Optional[str]]) -> "RunConfig":
        unknown = sorted(set(values) - set(cls.model_fields))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{key: ("" if value is None else value) for key, value in values.items()})

    @classmethod
    def from_text(cls, text: str, overrides: Optional[Mapping[str, str]] = None) -> "RunConfig":
        values: Dict[str, Optional[str]] = dict(dotenv_values(stream=StringIO(text)))
        values.update(overrides or {})
        return cls.from_mapping(values)

    @classmethod
    def from_file(cls, path: Path, overrides: Optional[Mapping[str, str]] = None) -> "RunConfig":
        """Load a key=value config file; ``overrides`` win over file values."""
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        logger.debug("loading run config from %s", path)
        return cls.from_text(path.read_text(encoding="utf-8"), overrides)

    def to_text(self) -> str:
        lines = []
        for key in sorted(type(self).model_fields):
            lines.append(f"{key}={_format_value(getattr(self, key))}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(repr(float(item)) for item in value)
    if isinstance(value, date):
        return value.isoformat()
    return str(value)


def parse_overrides(pairs: Iterable[str]) -> Dict[str, str]:
    """Turn ``["key=value", ...]`` CLI flags into a mapping."""
    overrides: Dict[str, str] = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value: {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides
