"""
Catalog ingestion and rasterization
===================================

Parses earthquake catalogs, projects epicenters onto the forecasting grid,
rasterizes daily magnitude heat maps and builds time-cylinder labels.

Days are whole UTC calendar days. Internally a day is its proleptic
Gregorian ordinal (``date.toordinal()``) so day arithmetic is integer math.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from datetime import date, datetime, timedelta
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, TextIO, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed, effective_n_jobs

from src.exceptions import (
    CatalogParseError,
    EmptyCatalogError,
    ShapeMismatchError,
    SplitError,
)
from src.gridio import MAGIC_F32, read_grid, write_grid
from src.models import KM_PER_DEGREE, CatalogFormat, Event, GridSpec, LabelSpec

logger = logging.getLogger(__name__)

CATALOG_COLUMNS = ["time", "lat", "lon", "mag", "depth_km"]


# =============================================================================
# CATALOG
# =============================================================================

@dataclass(frozen=True)
class Catalog:
    """Time-sorted events plus the rows a lenient parse rejected."""

    events: Tuple[Event, ...]
    rejected: Tuple[CatalogParseError, ...] = ()

    def __post_init__(self):
        ordered = tuple(sorted(self.events, key=lambda event: event.time))
        object.__setattr__(self, "events", ordered)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    @property
    def time_span(self) -> Optional[Tuple[datetime, datetime]]:
        if not self.events:
            return None
        return (self.events[0].time, self.events[-1].time)

    @property
    def first_day(self) -> Optional[date]:
        return self.events[0].day if self.events else None

    @property
    def last_day(self) -> Optional[date]:
        return self.events[-1].day if self.events else None

    @cached_property
    def day_ordinals(self) -> np.ndarray:
        return np.array([event.day.toordinal() for event in self.events], dtype=np.int64)

    @cached_property
    def lats(self) -> np.ndarray:
        return np.array([event.lat for event in self.events], dtype=np.float64)

    @cached_property
    def lons(self) -> np.ndarray:
        return np.array([event.lon for event in self.events], dtype=np.float64)

    @cached_property
    def mags(self) -> np.ndarray:
        return np.array([event.mag for event in self.events], dtype=np.float64)

    def merged(self, extra: Iterable[Event]) -> "Catalog":
        return Catalog(events=self.events + tuple(extra), rejected=self.rejected)


def _line_from_parser_error(exc: Exception) -> int:
    match = re.search(r"line (\d+)", str(exc))
    return int(match.group(1)) if match else 0


def _to_float(text: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        return np.nan


def _numeric(column: pd.Series) -> np.ndarray:
    # float() is correctly rounded, so written catalogs re-parse bit for bit
    return column.map(_to_float).to_numpy(dtype=np.float64)


def parse_catalog(text_stream: TextIO, format_spec: Optional[CatalogFormat] = None) -> Catalog:
    """
    Parse a catalog CSV (``time,lat,lon,mag[,depth_km]``, ISO-8601 UTC times).

    Args:
        text_stream: Readable text stream with a header row
        format_spec: Column mapping; strict formats raise on the first bad row,
            lenient ones skip bad rows and record them in ``Catalog.rejected``

    Returns:
        Time-sorted Catalog

    Raises:
        CatalogParseError: malformed row (line number + field)
        EmptyCatalogError: no rows survive
    """
    fmt = format_spec or CatalogFormat()
    try:
        frame = pd.read_csv(
            text_stream, sep=fmt.delimiter, dtype=str, keep_default_na=False,
            skipinitialspace=True,
        )
    except pd.errors.EmptyDataError:
        raise EmptyCatalogError()
    except pd.errors.ParserError as exc:
        raise CatalogParseError(_line_from_parser_error(exc), "*", "wrong number of fields")

    frame.columns = [column.strip() for column in frame.columns]
    required = [fmt.time_col, fmt.lat_col, fmt.lon_col, fmt.mag_col]
    for column in required:
        if column not in frame.columns:
            raise CatalogParseError(1, column, "missing column")
    if frame.empty:
        raise EmptyCatalogError()

    frame = frame.fillna("")
    times = pd.to_datetime(frame[fmt.time_col].str.strip(), utc=True, errors="coerce", format="ISO8601")
    lats = _numeric(frame[fmt.lat_col])
    lons = _numeric(frame[fmt.lon_col])
    mags = _numeric(frame[fmt.mag_col])
    has_depth = fmt.depth_col is not None and fmt.depth_col in frame.columns
    if has_depth:
        depth_text = frame[fmt.depth_col].str.strip()
        depths = _numeric(depth_text)
        blank_depth = (depth_text == "").to_numpy()
    else:
        depths = np.full(len(frame), np.nan)
        blank_depth = np.ones(len(frame), dtype=bool)

    checks = [
        (fmt.time_col, times.isna().to_numpy(), "not an ISO-8601 time"),
        (fmt.lat_col, ~(np.abs(lats) <= 90.0), "latitude outside [-90, 90]"),
        (fmt.lon_col, ~(np.abs(lons) <= 180.0), "longitude outside [-180, 180]"),
        (fmt.mag_col, ~np.isfinite(mags), "magnitude not finite"),
    ]
    if has_depth:
        checks.append((fmt.depth_col, ~blank_depth & ~np.isfinite(depths), "depth not numeric"))

    bad = np.zeros(len(frame), dtype=bool)
    rejected: List[CatalogParseError] = []
    for index in range(len(frame)):
        for column, mask, reason in checks:
            if mask[index]:
                # header is line 1
                error = CatalogParseError(index + 2, column, reason)
                if fmt.strict:
                    raise error
                rejected.append(error)
                bad[index] = True
                break

    events = [
        Event(
            time=times.iloc[index].to_pydatetime(),
            lat=float(lats[index]),
            lon=float(lons[index]),
            mag=float(mags[index]),
            depth_km=None if blank_depth[index] else float(depths[index]),
        )
        for index in np.flatnonzero(~bad)
    ]
    if rejected:
        logger.warning("skipped %d malformed catalog rows", len(rejected))
    if not events:
        raise EmptyCatalogError()
    logger.info("parsed %d events", len(events))
    return Catalog(events=tuple(events), rejected=tuple(rejected))


def load_catalog(path: Path, format_spec: Optional[CatalogFormat] = None) -> Catalog:
    with open(path, "r", encoding="utf-8", newline="") as handle:
        return parse_catalog(handle, format_spec)


def write_catalog(catalog: Catalog, sink: TextIO) -> int:
    """Write the standard catalog CSV; returns rows written."""
    frame = pd.DataFrame(
        {
            "time": [event.time.strftime("%Y-%m-%dT%H:%M:%S.%fZ") for event in catalog],
            "lat": [event.lat for event in catalog],
            "lon": [event.lon for event in catalog],
            "mag": [event.mag for event in catalog],
            "depth_km": [event.depth_km for event in catalog],
        },
        columns=CATALOG_COLUMNS,
    )
    frame.to_csv(sink, index=False, lineterminator="\n")
    return len(frame)


def magnitude_summary(catalog: Catalog, grid: Optional[GridSpec] = None) -> Dict[str, object]:
    """Event counts overall, per whole-magnitude band and for M>=5 / M>=6."""
    mags = catalog.mags
    bands: Dict[str, int] = {}
    if len(mags):
        for band in range(int(np.floor(mags.min())), int(np.floor(mags.max())) + 1):
            count = int(np.count_nonzero((mags >= band) & (mags < band + 1)))
            bands[f"{band}<=M<{band + 1}"] = count
    summary: Dict[str, object] = {
        "total": len(catalog),
        "m_ge_5": int(np.count_nonzero(mags >= 5.0)),
        "m_ge_6": int(np.count_nonzero(mags >= 6.0)),
        "bands": bands,
        "first_day": catalog.first_day.isoformat() if catalog.first_day else None,
        "last_day": catalog.last_day.isoformat() if catalog.last_day else None,
    }
    if grid is not None:
        _, _, inside = project_cells(catalog.lats, catalog.lons, grid)
        summary["in_bounds"] = int(np.count_nonzero(inside))
    return summary


# =============================================================================
# PROJECTION
# =============================================================================

def project_cells(lats: np.ndarray, lons: np.ndarray, grid: GridSpec):
    """
    Vectorized equirectangular projection.

    Returns:
        (rows, cols, inside) where rows/cols are int64 and ``inside`` flags
        events within [0, n_rows) x [0, n_cols)
    """
    lats = np.asarray(lats, dtype=np.float64)
    lons = np.asarray(lons, dtype=np.float64)
    rows = np.floor((lats - grid.origin_lat) * KM_PER_DEGREE / grid.cell_km).astype(np.int64)
    cols = np.floor((lons - grid.origin_lon) * grid.km_per_degree_lon / grid.cell_km).astype(np.int64)
    inside = (rows >= 0) & (rows < grid.n_rows) & (cols >= 0) & (cols < grid.n_cols)
    return rows, cols, inside


def project_to_cell(event: Event, grid: GridSpec) -> Optional[Tuple[int, int]]:
    """Cell (row, col) containing the epicenter, or None outside the grid."""
    rows, cols, inside = project_cells(np.array([event.lat]), np.array([event.lon]), grid)
    if not inside[0]:
        return None
    return int(rows[0]), int(cols[0])


# =============================================================================
# HEAT MAPS
# =============================================================================

@dataclass(frozen=True)
class HeatMapSeq:
    """Daily magnitude rasters: maps[d, r, c] is the day's max magnitude, 0 if none."""

    start_day: date
    maps: np.ndarray

    @property
    def days(self) -> int:
        return int(self.maps.shape[0])

    @property
    def end_day(self) -> date:
        return self.start_day + timedelta(days=self.days - 1)

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return (int(self.maps.shape[1]), int(self.maps.shape[2]))

    def day_index(self, day: date) -> int:
        return day.toordinal() - self.start_day.toordinal()

    def all_days(self) -> List[date]:
        return [self.start_day + timedelta(days=offset) for offset in range(self.days)]


def _rasterize_chunk(offsets, rows, cols, mags, n_days, shape) -> np.ndarray:
    chunk = np.zeros((n_days,) + shape, dtype=np.float64)
    np.maximum.at(chunk, (offsets, rows, cols), mags)
    return chunk


def rasterize_daily(
    catalog: Catalog,
    grid: GridSpec,
    start_day: date,
    days: int,
    n_jobs: int = 1,
) -> HeatMapSeq:
    """
    Rasterize events into one magnitude map per day.

    Same-cell same-day collisions keep the maximum magnitude. Negative
    magnitudes leave the cell at 0. Work is split into contiguous day chunks;
    the result does not depend on ``n_jobs``.

    Raises:
        ValueError: days <= 0
    """
    if days <= 0:
        raise ValueError(f"days must be >= 1, got {days}")
    shape = grid.shape
    if len(catalog) == 0:
        return HeatMapSeq(start_day=start_day, maps=np.zeros((days,) + shape))

    rows, cols, inside = project_cells(catalog.lats, catalog.lons, grid)
    offsets = catalog.day_ordinals - start_day.toordinal()
    keep = inside & (offsets >= 0) & (offsets < days)
    offsets, rows, cols, mags = offsets[keep], rows[keep], cols[keep], catalog.mags[keep]

    n_chunks = max(1, min(days, effective_n_jobs(n_jobs)))
    if n_chunks == 1:
        maps = _rasterize_chunk(offsets, rows, cols, mags, days, shape)
    else:
        bounds = np.linspace(0, days, n_chunks + 1).astype(np.int64)
        tasks = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sel = (offsets >= lo) & (offsets < hi)
            tasks.append(delayed(_rasterize_chunk)(
                offsets[sel] - lo, rows[sel], cols[sel], mags[sel], int(hi - lo), shape,
            ))
        maps = np.concatenate(Parallel(n_jobs=n_jobs)(tasks), axis=0)
    logger.debug("rasterized %d in-bounds events over %d days", len(mags), days)
    return HeatMapSeq(start_day=start_day, maps=maps)


def write_heatmaps(path: Path, heatmaps: HeatMapSeq, grid: GridSpec) -> Path:
    """Write the QGRD block plus a JSON sidecar with start day and grid."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as handle:
        write_grid(handle, heatmaps.maps, MAGIC_F32)
    sidecar = {"start_day": heatmaps.start_day.isoformat(), "days": heatmaps.days,
               "grid": grid.model_dump()}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def read_heatmaps(path: Path) -> Tuple[HeatMapSeq, GridSpec]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text())
    with open(path, "rb") as handle:
        maps = read_grid(handle)
    grid = GridSpec(**sidecar["grid"])
    if maps.shape[1:] != grid.shape:
        raise ShapeMismatchError(f"raster shape {maps.shape[1:]} disagrees with grid {grid.shape}")
    return HeatMapSeq(start_day=date.fromisoformat(sidecar["start_day"]), maps=maps), grid


# =============================================================================
# LABELS
# =============================================================================

@dataclass(frozen=True)
class LabelTensor:
    """
    Per reference day and cell: y = 1 iff a qualifying event falls in the
    cylinder [T + t_min, T + t_max]; valid_mask is 0 where the cylinder runs
    past the end of the catalog (y is forced to 0 there).
    """

    reference_days: Tuple[date, ...]
    y: np.ndarray
    valid_mask: np.ndarray
    spec: LabelSpec

    def __post_init__(self):
        if self.y.shape != self.valid_mask.shape:
            raise ShapeMismatchError("labels and valid mask disagree in shape")
        if self.y.shape[0] != len(self.reference_days):
            raise ShapeMismatchError("one label map per reference day is required")

    @property
    def grid_shape(self) -> Tuple[int, int]:
        return (int(self.y.shape[1]), int(self.y.shape[2]))

    def index_of(self, day: date) -> int:
        return self.reference_days.index(day)

    def subset(self, days: Sequence[date]) -> "LabelTensor":
        positions = {day: index for index, day in enumerate(self.reference_days)}
        idx = np.array([positions[day] for day in days], dtype=np.int64)
        return LabelTensor(tuple(days), self.y[idx], self.valid_mask[idx], self.spec)


def _cylinder_labels(
    indicator: np.ndarray,
    base_ordinal: int,
    end_ordinal: Optional[int],
    reference_days: Sequence[date],
    spec: LabelSpec,
) -> LabelTensor:
    days = indicator.shape[0]
    cumulative = np.zeros((days + 1,) + indicator.shape[1:], dtype=np.int32)
    np.cumsum(indicator, axis=0, dtype=np.int32, out=cumulative[1:])

    ordinals = np.array([day.toordinal() for day in reference_days], dtype=np.int64)
    lo = np.clip(ordinals + spec.t_min_days - base_ordinal, 0, days)
    hi = np.clip(ordinals + spec.t_max_days - base_ordinal + 1, 0, days)
    counts = cumulative[hi] - cumulative[lo]

    if end_ordinal is None:
        valid_days = np.zeros(len(ordinals), dtype=bool)
    else:
        valid_days = ordinals + spec.t_max_days <= end_ordinal
    valid = np.broadcast_to(valid_days[:, None, None], counts.shape).copy()
    y = ((counts > 0) & valid).astype(np.uint8)
    return LabelTensor(tuple(reference_days), y, valid, spec)


def build_labels(
    catalog: Catalog,
    grid: GridSpec,
    spec: LabelSpec,
    reference_days: Sequence[date],
) -> LabelTensor:
    """
    Time-cylinder labels with inclusive day bounds.

    y(T, r, c) = 1 iff an event with mag >= Mc maps to (r, c) on a day in
    [T + t_min, T + t_max]. Reference days whose cylinder ends after the last
    catalog day are marked invalid.
    """
    reference_days = list(reference_days)
    n_rows, n_cols = grid.shape
    if not reference_days:
        empty = np.zeros((0, n_rows, n_cols))
        return LabelTensor((), empty.astype(np.uint8), empty.astype(bool), spec)

    base = min(reference_days).toordinal() + spec.t_min_days
    span = max(reference_days).toordinal() + spec.t_max_days - base + 1
    indicator = np.zeros((span, n_rows, n_cols), dtype=bool)
    if len(catalog):
        rows, cols, inside = project_cells(catalog.lats, catalog.lons, grid)
        offsets = catalog.day_ordinals - base
        keep = inside & (catalog.mags >= spec.mag_threshold) & (offsets >= 0) & (offsets < span)
        indicator[offsets[keep], rows[keep], cols[keep]] = True
    end = catalog.last_day.toordinal() if len(catalog) else None
    return _cylinder_labels(indicator, base, end, reference_days, spec)


def labels_from_heatmaps(
    heatmaps: HeatMapSeq,
    spec: LabelSpec,
    reference_days: Sequence[date],
) -> LabelTensor:
    """
    Labels read off the rasters themselves.

    Equal to ``build_labels`` when the rasters span the catalog from its first
    to its last day, because a cell's daily value is >= Mc exactly when one of
    that day's events there is. Only for in-memory rasters: a QGRD reload has
    float32 values, and an event at exactly Mc falls below an Mc with no exact
    float32 form (4.7, 3.3). Stored runs label from the catalog instead.
    """
    if spec.mag_threshold <= 0:
        raise ValueError("raster labels need a positive magnitude threshold")
    indicator = heatmaps.maps >= spec.mag_threshold
    return _cylinder_labels(
        indicator, heatmaps.start_day.toordinal(), heatmaps.end_day.toordinal(),
        list(reference_days), spec,
    )


# =============================================================================
# CHRONOLOGICAL SPLITS
# =============================================================================

class TimeSplit(NamedTuple):
    train: List[date]
    val: List[date]
    test: List[date]


def split_days(
    first_day: date,
    n_days: int,
    fractions: Sequence[float],
    gap_days: int,
) -> TimeSplit:
    """
    Contiguous chronological split of ``n_days`` starting at ``first_day``.

    Split boundaries sit at the cumulative fractions of the span; each
    non-empty split after the first non-empty one gives up its first
    ``gap_days`` days so no label cylinder crosses into it.
    """
    if len(fractions) != 3:
        raise ValueError("three fractions (train, val, test) are required")
    fractions = [float(value) for value in fractions]
    if min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be non-negative and sum to 1")
    if gap_days < 0:
        raise ValueError("gap_days must be >= 0")

    bounds = [0] + [int(round(n_days * value)) for value in np.cumsum(fractions)]
    bounds[-1] = n_days
    segments: List[List[date]] = []
    seen_nonempty = False
    for index, fraction in enumerate(fractions):
        lo, hi = bounds[index], bounds[index + 1]
        if fraction == 0:
            segments.append([])
            continue
        if seen_nonempty:
            lo += gap_days
        if lo >= hi:
            raise SplitError(
                f"split {index} is empty after a {gap_days}-day gap ({n_days} days available)"
            )
        seen_nonempty = True
        segments.append([first_day + timedelta(days=offset) for offset in range(lo, hi)])
    return TimeSplit(*segments)


def split_by_time(catalog: Catalog, fractions: Sequence[float], gap_days: int) -> TimeSplit:
    """Chronological train/val/test days over the catalog span with purge gaps."""
    if len(catalog) == 0:
        raise EmptyCatalogError()
    n_days = catalog.last_day.toordinal() - catalog.first_day.toordinal() + 1
    return split_days(catalog.first_day, n_days, fractions, gap_days)
