"""
RTL Seismicity Features
=======================

Region-Time-Length index per cell and reference day:

    R = sum exp(-r_i / r0)
    T = sum exp(-(t - t_i) / t0)
    L = sum l(M_i) / r_i
    RTL = R * T * L

over past events with M_i >= m_min, 0 < t - t_i <= t_max and r_i <= r_max,
where r_i is the great-circle epicentral distance floored at eps_km and
l(M) = 10 ** (0.5 M - 1.8) km is the rupture length.

The gridded evaluation indexes epicenters in a haversine BallTree and is
checked against the naive per-cell scan (``method="naive"``).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import date
from typing import List, Optional, Sequence, TextIO, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed, effective_n_jobs
from sklearn.neighbors import BallTree

from src.catalog import Catalog, HeatMapSeq, LabelTensor
from src.exceptions import ShapeMismatchError
from src.models import GridSpec, RtlParams

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0
REFERENCE_DAY_BLOCK = 256


def rupture_length(mag):
    """Rupture length in km: 10 ** (0.5 * mag - 1.8)."""
    return 10.0 ** (0.5 * np.asarray(mag, dtype=np.float64) - 1.8)


def haversine_km(lat1, lon1, lat2, lon2) -> np.ndarray:
    """Great-circle distance in km between points given in degrees (broadcasts)."""
    phi1, phi2 = np.radians(lat1), np.radians(lat2)
    dphi = phi2 - phi1
    dlam = np.radians(lon2) - np.radians(lon1)
    a = np.sin(dphi / 2.0) ** 2 + np.cos(phi1) * np.cos(phi2) * np.sin(dlam / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def rtl_factors(
    distances_km: np.ndarray,
    ages_days: np.ndarray,
    mags: np.ndarray,
    params: RtlParams,
) -> Tuple[float, float, float]:
    """
    The three RTL sums for one evaluation point.

    Args:
        distances_km: Raw epicentral distances
        ages_days: t - t_i in days
        mags: Event magnitudes
        params: RTL parameters

    Returns:
        (R, T, L); all zero when no event qualifies
    """
    distances = np.maximum(np.asarray(distances_km, dtype=np.float64), params.eps_km)
    ages = np.asarray(ages_days, dtype=np.float64)
    mags = np.asarray(mags, dtype=np.float64)
    keep = (mags >= params.m_min) & (ages > 0) & (ages <= params.t_max) & (distances <= params.r_max)
    if not keep.any():
        return 0.0, 0.0, 0.0
    r, age, mag = distances[keep], ages[keep], mags[keep]
    region = float(np.sum(np.exp(-r / params.r0)))
    time = float(np.sum(np.exp(-age / params.t0)))
    length = float(np.sum(rupture_length(mag) / r))
    return region, time, length


def rtl_at(catalog: Catalog, lat: float, lon: float, day: date, params: RtlParams) -> float:
    """RTL at one point on one reference day; only events on earlier days contribute."""
    if len(catalog) == 0:
        return 0.0
    distances = haversine_km(lat, lon, catalog.lats, catalog.lons)
    ages = day.toordinal() - catalog.day_ordinals
    region, time, length = rtl_factors(distances, ages, catalog.mags, params)
    return region * time * length


@dataclass(frozen=True)
class RtlFeatureMap:
    """RTL values shaped (reference days, n_rows, n_cols)."""

    reference_days: Tuple[date, ...]
    values: np.ndarray
    params: RtlParams


# =============================================================================
# GRID EVALUATION
# =============================================================================

def _naive_grid(catalog, grid, reference_days, params) -> np.ndarray:
    center_lat, center_lon = grid.cell_centers()
    values = np.zeros((len(reference_days),) + grid.shape)
    for t_index, day in enumerate(reference_days):
        for row in range(grid.n_rows):
            for col in range(grid.n_cols):
                values[t_index, row, col] = rtl_at(
                    catalog, center_lat[row, col], center_lon[row, col], day, params,
                )
    return values


def _cell_series(lat, lon, candidates, lats, lons, ordinals, mags, ref_ordinals, params) -> np.ndarray:
    series = np.zeros(len(ref_ordinals))
    if len(candidates) == 0:
        return series
    distances = np.maximum(haversine_km(lat, lon, lats[candidates], lons[candidates]), params.eps_km)
    in_range = (distances <= params.r_max) & (mags[candidates] >= params.m_min)
    by_day = np.argsort(ordinals[candidates][in_range], kind="stable")
    cand_ordinals = ordinals[candidates][in_range][by_day]
    region_terms = np.exp(-distances[in_range][by_day] / params.r0)
    length_terms = (rupture_length(mags[candidates][in_range]) / distances[in_range])[by_day]

    # Reference days in blocks; each block sees only events inside its t_max reach.
    ref_order = np.argsort(ref_ordinals, kind="stable")
    for start in range(0, len(ref_order), REFERENCE_DAY_BLOCK):
        block = ref_order[start:start + REFERENCE_DAY_BLOCK]
        days = ref_ordinals[block]
        lo = np.searchsorted(cand_ordinals, days[0] - params.t_max, side="left")
        hi = np.searchsorted(cand_ordinals, days[-1], side="left")
        if hi <= lo:
            continue
        ages = (days[:, None] - cand_ordinals[None, lo:hi]).astype(np.float64)
        active = (ages > 0) & (ages <= params.t_max)
        region = np.where(active, region_terms[None, lo:hi], 0.0).sum(axis=1)
        time = np.where(active, np.exp(-ages / params.t0), 0.0).sum(axis=1)
        length = np.where(active, length_terms[None, lo:hi], 0.0).sum(axis=1)
        series[block] = region * time * length
    return series


def _cell_chunk(cells, lats, lons, ordinals, mags, ref_ordinals, params) -> List[np.ndarray]:
    return [
        _cell_series(lat, lon, candidates, lats, lons, ordinals, mags, ref_ordinals, params)
        for lat, lon, candidates in cells
    ]


def standardize(values: np.ndarray) -> np.ndarray:
    """Per-cell z-score over the reference-day axis; constant cells become 0."""
    mean = values.mean(axis=0, keepdims=True)
    std = values.std(axis=0, keepdims=True)
    safe = np.where(std > 0, std, 1.0)
    return np.where(std > 0, (values - mean) / safe, 0.0)


def rtl_grid(
    catalog: Catalog,
    grid: GridSpec,
    reference_days: Sequence[date],
    params: RtlParams,
    n_jobs: int = 1,
    method: str = "indexed",
) -> RtlFeatureMap:
    """
    Evaluate RTL at every cell center for every reference day.

    Args:
        catalog: Event catalog
        grid: Target grid
        reference_days: Days to evaluate
        params: RTL parameters (``standardize`` z-scores each cell's series)
        n_jobs: joblib workers for the indexed path; output does not depend on it
        method: "indexed" (BallTree candidates) or "naive" (full scan per cell)

    Returns:
        RtlFeatureMap
    """
    reference_days = tuple(reference_days)
    if method not in ("indexed", "naive"):
        raise ValueError(f"unknown rtl method: {method}")

    if len(catalog) == 0 or not reference_days:
        values = np.zeros((len(reference_days),) + grid.shape)
    elif method == "naive":
        values = _naive_grid(catalog, grid, reference_days, params)
    else:
        lats, lons, mags = catalog.lats, catalog.lons, catalog.mags
        ordinals = catalog.day_ordinals
        center_lat, center_lon = grid.cell_centers()
        tree = BallTree(np.radians(np.column_stack([lats, lons])), metric="haversine")
        # Slightly wider than r_max; candidates are re-filtered with haversine_km.
        radius = (params.r_max * (1.0 + 1e-6) + 1e-6) / EARTH_RADIUS_KM
        queries = np.radians(np.column_stack([center_lat.ravel(), center_lon.ravel()]))
        neighbours = tree.query_radius(queries, r=radius)
        cells = [
            (float(lat), float(lon), np.sort(found))
            for lat, lon, found in zip(center_lat.ravel(), center_lon.ravel(), neighbours)
        ]
        ref_ordinals = np.array([day.toordinal() for day in reference_days], dtype=np.int64)

        n_chunks = max(1, min(len(cells), effective_n_jobs(n_jobs)))
        chunks = np.array_split(np.arange(len(cells)), n_chunks)
        if n_chunks == 1:
            results = [_cell_chunk(cells, lats, lons, ordinals, mags, ref_ordinals, params)]
        else:
            results = Parallel(n_jobs=n_jobs)(
                delayed(_cell_chunk)(
                    [cells[i] for i in chunk], lats, lons, ordinals, mags, ref_ordinals, params,
                )
                for chunk in chunks
            )
        series = [cell for chunk in results for cell in chunk]
        values = np.stack(series, axis=1).reshape((len(reference_days),) + grid.shape)

    if params.standardize and len(reference_days):
        values = standardize(values)
    logger.debug("rtl grid: %d days x %s cells (%s)", len(reference_days), grid.shape, method)
    return RtlFeatureMap(reference_days=reference_days, values=values, params=params)


# =============================================================================
# INDICATORS & EXPORT
# =============================================================================

def indicator_features(heatmaps: HeatMapSeq, reference_days: Sequence[date], n_days: int) -> np.ndarray:
    """
    Binary earthquake indicators for the last ``n_days`` days.

    Returns:
        uint8 array (reference days, n_rows, n_cols, n_days); slot k-1 flags any
        event on day T-k+1. Days before the raster start count as quiet.
    """
    reference_days = list(reference_days)
    rows, cols = heatmaps.grid_shape
    out = np.zeros((len(reference_days), rows, cols, n_days), dtype=np.uint8)
    for t_index, day in enumerate(reference_days):
        end = heatmaps.day_index(day)
        for k in range(n_days):
            index = end - k
            if 0 <= index < heatmaps.days:
                out[t_index, :, :, k] = heatmaps.maps[index] > 0
    return out


def export_features(
    features: RtlFeatureMap,
    labels: LabelTensor,
    sink: TextIO,
    indicators: Optional[np.ndarray] = None,
) -> int:
    """
    Write ``day,row,col,rtl,label[,ind_1..ind_N]`` rows for valid cells.

    The first line echoes the RTL parameters as a ``#`` comment.

    Returns:
        Number of data rows written
    """
    if features.values.shape != labels.y.shape:
        raise ShapeMismatchError(
            f"features {features.values.shape} and labels {labels.y.shape} disagree"
        )
    if tuple(features.reference_days) != tuple(labels.reference_days):
        raise ShapeMismatchError("features and labels cover different reference days")
    if indicators is not None and indicators.shape[:3] != labels.y.shape:
        raise ShapeMismatchError("indicator features disagree with labels in shape")

    t_idx, rows, cols = np.nonzero(labels.valid_mask)
    frame = pd.DataFrame({
        "day": [features.reference_days[i].isoformat() for i in t_idx],
        "row": rows,
        "col": cols,
        "rtl": features.values[t_idx, rows, cols],
        "label": labels.y[t_idx, rows, cols].astype(np.int64),
    })
    if indicators is not None:
        for k in range(indicators.shape[3]):
            frame[f"ind_{k + 1}"] = indicators[t_idx, rows, cols, k].astype(np.int64)

    sink.write(features.params.header_comment() + "\n")
    frame.to_csv(sink, index=False, lineterminator="\n")
    logger.info("exported %d feature rows", len(frame))
    return len(frame)


def read_features(stream: TextIO) -> pd.DataFrame:
    """Parse a feature export back into a DataFrame with exact float values."""
    return pd.read_csv(stream, comment="#", float_precision="round_trip")
