"""
Domain models for the earthquake forecasting pipeline.

Pydantic models with validators for every value object that crosses a module
boundary: catalog rows, grid geometry, label cylinders, feature parameters and
the model/training/synthetic-data configurations.
"""

from __future__ import annotations

import math
from datetime import date, datetime, timezone
from typing import Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# Kilometers per degree of latitude (equirectangular projection).
KM_PER_DEGREE = 111.32


# =============================================================================
# CATALOG
# =============================================================================

class Event(BaseModel):
    """One catalog row: epicenter, origin time and magnitude."""

    model_config = ConfigDict(frozen=True)

    time: datetime
    lat: float = Field(..., ge=-90.0, le=90.0)
    lon: float = Field(..., ge=-180.0, le=180.0)
    mag: float
    depth_km: Optional[float] = None

    @field_validator("time")
    @classmethod
    def _to_utc(cls, value: datetime) -> datetime:
        if value.tzinfo is None:
            return value.replace(tzinfo=timezone.utc)
        return value.astimezone(timezone.utc)

    @field_validator("mag")
    @classmethod
    def _finite_mag(cls, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError("magnitude must be finite")
        return value

    @property
    def day(self) -> date:
        """UTC calendar day of the event."""
        return self.time.date()


class CatalogFormat(BaseModel):
    """Column mapping for catalog CSV files."""

    time_col: str = "time"
    lat_col: str = "lat"
    lon_col: str = "lon"
    mag_col: str = "mag"
    depth_col: Optional[str] = "depth_km"
    delimiter: str = ","
    strict: bool = True


class GridSpec(BaseModel):
    """
    Equirectangular grid anchored at its south-west corner.

    Rows grow northwards and columns eastwards. Longitude degrees are scaled
    by cos(ref_lat) so cells stay roughly square at the reference latitude.
    """

    model_config = ConfigDict(frozen=True)

    origin_lat: float = Field(..., ge=-90.0, le=90.0)
    origin_lon: float = Field(..., ge=-180.0, le=180.0)
    cell_km: float = Field(..., gt=0.0)
    n_rows: int = Field(..., ge=1)
    n_cols: int = Field(..., ge=1)
    ref_lat: float = Field(..., gt=-90.0, lt=90.0)

    @property
    def shape(self) -> Tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def km_per_degree_lon(self) -> float:
        return KM_PER_DEGREE * math.cos(math.radians(self.ref_lat))

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Latitude and longitude of every cell center, each shaped (n_rows, n_cols)."""
        rows = (np.arange(self.n_rows, dtype=np.float64) + 0.5) * self.cell_km
        cols = (np.arange(self.n_cols, dtype=np.float64) + 0.5) * self.cell_km
        lat = self.origin_lat + rows / KM_PER_DEGREE
        lon = self.origin_lon + cols / self.km_per_degree_lon
        return np.meshgrid(lat, lon, indexing="ij")


class LabelSpec(BaseModel):
    """Time cylinder [T + t_min, T + t_max] and magnitude threshold Mc."""

    model_config = ConfigDict(frozen=True)

    t_min_days: int = 10
    t_max_days: int = 50
    mag_threshold: float = 3.5

    @model_validator(mode="after")
    def _check_bounds(self) -> "LabelSpec":
        if not 0 < self.t_min_days <= self.t_max_days:
            raise ValueError("need 0 < t_min_days <= t_max_days")
        return self


# =============================================================================
# FEATURES
# =============================================================================

class RtlParams(BaseModel):
    """Region-Time-Length parameters; r_max and t_max default to 2*r0 and 2*t0."""

    model_config = ConfigDict(frozen=True)

    r0: float = Field(50.0, gt=0.0)
    t0: float = Field(100.0, gt=0.0)
    r_max: Optional[float] = None
    t_max: Optional[float] = None
    m_min: float = 0.0
    eps_km: float = Field(1.0, gt=0.0)
    standardize: bool = False

    @model_validator(mode="after")
    def _fill_limits(self) -> "RtlParams":
        if self.r_max is None:
            object.__setattr__(self, "r_max", 2.0 * self.r0)
        if self.t_max is None:
            object.__setattr__(self, "t_max", 2.0 * self.t0)
        if self.r_max < self.r0:
            raise ValueError("r_max must be >= r0")
        if self.t_max < self.t0:
            raise ValueError("t_max must be >= t0")
        return self

    def header_comment(self) -> str:
        """Parameter echo written as the first line of feature exports."""
        return (
            f"# r0={self.r0!r},t0={self.t0!r},r_max={self.r_max!r},t_max={self.t_max!r},"
            f"m_min={self.m_min!r},eps_km={self.eps_km!r},standardize={self.standardize}"
        )


# =============================================================================
# MODEL & TRAINING
# =============================================================================

class ModelConfig(BaseModel):
    """Architecture of the forecasting network."""

    model_config = ConfigDict(frozen=True)

    variant: Literal["cnn", "cnn_lstm"] = "cnn_lstm"
    use_prior_residual: bool = True
    embed_channels: int = Field(16, ge=1)
    hidden_channels: int = Field(32, ge=1)
    window_days: int = Field(30, ge=1)
    kernel_size: int = Field(3, ge=1)
    embed_depth: int = Field(1, ge=1)
    head_depth: int = Field(2, ge=1)
    activation: Literal["relu", "tanh"] = "relu"
    prior_c: float = 0.0
    prior_mode: Literal["additive", "scaled"] = "additive"
    # initial forget-gate bias of the ConvLSTM cell
    forget_bias: float = 1.0
    seed: int = 0

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("kernel_size must be odd")
        return value


class TrainConfig(BaseModel):
    """Optimizer, class weights and schedule."""

    model_config = ConfigDict(frozen=True)

    minor_class_weight: float = Field(1000.0, gt=0.0)
    major_class_weight: float = Field(1.0, gt=0.0)
    # 0 is allowed so a frozen run can be checked for bit-identical parameters
    learning_rate: float = Field(1e-3, ge=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(8, ge=1)
    patience: Optional[int] = Field(3, ge=1)
    grad_clip: Optional[float] = Field(None, gt=0.0)
    seed: int = 0
    show_progress: bool = False

    @property
    def class_weights(self) -> Tuple[float, float]:
        return (self.major_class_weight, self.minor_class_weight)


# =============================================================================
# SYNTHETIC DATA
# =============================================================================

class SynthConfig(BaseModel):
    """Background seismicity plus planted precursor/mainshock pairs."""

    model_config = ConfigDict(frozen=True)

    grid: GridSpec
    start_day: date = date(2000, 1, 1)
    days: int = Field(..., ge=1)
    background_rate: float = Field(0.002, ge=0.0)
    b_value: float = Field(1.0, gt=0.0)
    m_min: float = 2.0
    m_span: float = Field(4.0, gt=0.0)
    precursor_mag: float = 4.0
    mainshock_mag: float = 5.5
    lag_days: int = 15
    pair_rate: float = Field(0.0, ge=0.0, le=1.0)
    pair_count: Optional[int] = Field(None, ge=0)
    labels: LabelSpec = LabelSpec(mag_threshold=5.0)
    seed: int = 0

    @model_validator(mode="after")
    def _check_pairs(self) -> "SynthConfig":
        if not self.labels.t_min_days <= self.lag_days <= self.labels.t_max_days:
            raise ValueError("lag_days must lie inside [t_min_days, t_max_days]")
        if self.mainshock_mag < self.labels.mag_threshold:
            raise ValueError("mainshock_mag must be >= the label threshold")
        if self.precursor_mag >= self.labels.mag_threshold:
            raise ValueError("precursor_mag must stay below the label threshold")
        return self
