"""
Synthetic catalogs
==================

Background seismicity is Poisson per cell-day with Gutenberg-Richter
magnitudes truncated at m_min + m_span. Planted precursor/mainshock pairs put
a sub-threshold precursor in a cell and a mainshock above the label threshold
in the same cell ``lag_days`` later, a signal only visible through the inputs.

Background and planting draw from separate seeded streams so changing the
pair settings leaves the background catalog untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import date, datetime, time, timedelta, timezone
from typing import List, Sequence, Tuple

import numpy as np

from src.catalog import Catalog
from src.models import KM_PER_DEGREE, Event, GridSpec, LabelSpec, SynthConfig

logger = logging.getLogger(__name__)

SECONDS_PER_DAY = 86400


@dataclass(frozen=True)
class PlantedPair:
    row: int
    col: int
    precursor_day: date
    mainshock_day: date


@dataclass(frozen=True)
class PlantedCatalog:
    """Merged catalog plus the pairs that were planted and the ones dropped at the end."""

    catalog: Catalog
    pairs: Tuple[PlantedPair, ...]
    skipped: int


def gr_magnitudes(rng: np.random.Generator, size: int, m_min: float, b_value: float, m_span: float) -> np.ndarray:
    """
    Inverse-CDF draws from the truncated law P(M >= m) = 10 ** (-b (m - m_min)).
    """
    u = rng.random(size)
    tail = 1.0 - 10.0 ** (-b_value * m_span)
    return m_min - np.log10(1.0 - u * tail) / b_value


def _events_in_cells(
    rng: np.random.Generator,
    grid: GridSpec,
    start_day: date,
    day_offsets: np.ndarray,
    rows: np.ndarray,
    cols: np.ndarray,
    mags: np.ndarray,
) -> List[Event]:
    size = len(day_offsets)
    u_row = rng.uniform(0.05, 0.95, size)
    u_col = rng.uniform(0.05, 0.95, size)
    seconds = rng.integers(0, SECONDS_PER_DAY, size)
    lats = grid.origin_lat + (rows + u_row) * grid.cell_km / KM_PER_DEGREE
    lons = grid.origin_lon + (cols + u_col) * grid.cell_km / grid.km_per_degree_lon
    midnight = datetime.combine(start_day, time(0, 0), tzinfo=timezone.utc)
    return [
        Event(
            time=midnight + timedelta(days=int(day_offsets[i]), seconds=int(seconds[i])),
            lat=float(lats[i]), lon=float(lons[i]), mag=float(mags[i]),
        )
        for i in range(size)
    ]


def generate_background(config: SynthConfig) -> Catalog:
    """Poisson(background_rate) events per cell-day with truncated GR magnitudes."""
    rng = np.random.default_rng([config.seed, 0])
    grid = config.grid
    counts = rng.poisson(config.background_rate, size=(config.days,) + grid.shape)
    day_idx, row_idx, col_idx = np.nonzero(counts)
    repeats = counts[day_idx, row_idx, col_idx]
    day_idx = np.repeat(day_idx, repeats)
    row_idx = np.repeat(row_idx, repeats)
    col_idx = np.repeat(col_idx, repeats)
    mags = gr_magnitudes(rng, len(day_idx), config.m_min, config.b_value, config.m_span)
    events = _events_in_cells(rng, grid, config.start_day, day_idx, row_idx, col_idx, mags)
    logger.info("generated %d background events", len(events))
    return Catalog(events=tuple(events))


def plant_precursors(catalog: Catalog, config: SynthConfig) -> PlantedCatalog:
    """
    Insert precursor/mainshock pairs.

    With ``pair_count`` set, exactly that many distinct (day, cell) precursors
    are drawn among days whose mainshock still fits in the catalog. Otherwise
    every cell-day starts a pair with probability ``pair_rate`` and pairs whose
    mainshock would fall past the last day are skipped and counted.
    """
    rng = np.random.default_rng([config.seed, 1])
    grid = config.grid
    n_rows, n_cols = grid.shape
    cells = n_rows * n_cols
    skipped = 0

    if config.pair_count is not None:
        feasible_days = max(0, config.days - config.lag_days)
        available = feasible_days * cells
        count = min(config.pair_count, available)
        if count < config.pair_count:
            skipped = config.pair_count - count
        flat = np.sort(rng.choice(available, size=count, replace=False)) if count else np.zeros(0, dtype=np.int64)
        days, rem = np.divmod(flat, cells)
        rows, cols = np.divmod(rem, n_cols)
    elif config.pair_rate > 0:
        starts = rng.random((config.days,) + grid.shape) < config.pair_rate
        days, rows, cols = np.nonzero(starts)
        fits = days + config.lag_days < config.days
        skipped = int(np.count_nonzero(~fits))
        days, rows, cols = days[fits], rows[fits], cols[fits]
    else:
        return PlantedCatalog(catalog=catalog, pairs=(), skipped=0)

    n = len(days)
    precursors = _events_in_cells(
        rng, grid, config.start_day, days, rows, cols, np.full(n, config.precursor_mag),
    )
    mainshocks = _events_in_cells(
        rng, grid, config.start_day, days + config.lag_days, rows, cols, np.full(n, config.mainshock_mag),
    )
    pairs = tuple(
        PlantedPair(
            row=int(rows[i]), col=int(cols[i]),
            precursor_day=config.start_day + timedelta(days=int(days[i])),
            mainshock_day=config.start_day + timedelta(days=int(days[i]) + config.lag_days),
        )
        for i in range(n)
    )
    if skipped:
        logger.warning("skipped %d pairs that would end past the catalog", skipped)
    logger.info("planted %d precursor/mainshock pairs", n)
    return PlantedCatalog(catalog=catalog.merged(precursors + mainshocks), pairs=pairs, skipped=skipped)


def synthesize(config: SynthConfig) -> PlantedCatalog:
    """Background catalog with planted pairs."""
    return plant_precursors(generate_background(config), config)


def planted_pair_scores(
    planted: PlantedCatalog,
    grid_shape: Tuple[int, int],
    reference_days: Sequence[date],
    spec: LabelSpec,
) -> np.ndarray:
    """
    The planted-signal oracle: 1 at (T, r, c) iff a planted pair in (r, c) has
    its mainshock inside [T + t_min, T + t_max], else 0.
    """
    scores = np.zeros((len(reference_days),) + tuple(grid_shape))
    ordinals = np.array([day.toordinal() for day in reference_days], dtype=np.int64)
    for pair in planted.pairs:
        shock = pair.mainshock_day.toordinal()
        hit = (ordinals + spec.t_min_days <= shock) & (shock <= ordinals + spec.t_max_days)
        scores[hit, pair.row, pair.col] = 1.0
    return scores
