"""Shared fixtures for the test suite."""

from datetime import date, datetime, timedelta, timezone

import pytest

from src.models import KM_PER_DEGREE, Event, GridSpec

START = date(2000, 1, 1)


def cell_event(grid: GridSpec, day: int, row: int, col: int, mag: float,
               frac_row: float = 0.5, frac_col: float = 0.5, hour: int = 12) -> Event:
    """An event inside cell (row, col) on START + day."""
    lat = grid.origin_lat + (row + frac_row) * grid.cell_km / KM_PER_DEGREE
    lon = grid.origin_lon + (col + frac_col) * grid.cell_km / grid.km_per_degree_lon
    when = datetime.combine(START + timedelta(days=day), datetime.min.time(), tzinfo=timezone.utc)
    return Event(time=when + timedelta(hours=hour), lat=lat, lon=lon, mag=mag)


@pytest.fixture
def grid() -> GridSpec:
    return GridSpec(origin_lat=30.0, origin_lon=130.0, cell_km=10.0, n_rows=16, n_cols=16, ref_lat=35.0)


@pytest.fixture
def small_grid() -> GridSpec:
    return GridSpec(origin_lat=30.0, origin_lon=130.0, cell_km=10.0, n_rows=4, n_cols=4, ref_lat=35.0)
