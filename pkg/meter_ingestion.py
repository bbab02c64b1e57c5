#!/usr/bin/env python3
"""
Smart-meter and weather CSV ingestion.

Reads `timestamp,kw` power files, `timestamp,temp_c` temperature files and
`timestamp,kw_hvac` sub-metered HVAC files, resamples them onto the working
grid and assembles the per-day matrices the disaggregation works on
(one column per calendar day, 96 rows at 15-minute resolution).
"""

from __future__ import annotations

import io
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from datetime import date, timedelta
from pathlib import Path
from typing import IO, Iterator, Optional, Sequence, Union

import numpy as np
import pandas as pd
import requests

from disagg_errors import DataError

log = logging.getLogger(__name__)

MINUTES_PER_DAY = 24 * 60
SAMPLES_PER_DAY = 96
TEMP_MIN_C = -40.0
TEMP_MAX_C = 60.0
HTTP_TIMEOUT = 30

POWER_COLUMN = "kw"
TEMPERATURE_COLUMN = "temp_c"
TRUTH_COLUMN = "kw_hvac"

Source = Union[str, Path, IO[bytes]]


def _readonly(values: np.ndarray) -> np.ndarray:
    arr = np.array(values, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """Timestamped samples; NaN marks a missing resampled bin."""

    timestamps: pd.DatetimeIndex
    values: np.ndarray
    kind: str = "power"
    interval_minutes: Optional[int] = None

    def __post_init__(self) -> None:
        stamps = pd.DatetimeIndex(self.timestamps)
        values = _readonly(self.values)
        if values.ndim != 1 or len(values) != len(stamps):
            raise DataError("timestamps and values differ in length")
        if len(stamps) and not (stamps.is_monotonic_increasing and stamps.is_unique):
            raise DataError("timestamps must be strictly increasing")
        if np.isinf(values).any():
            raise DataError("non-finite sample value")
        if self.kind != "temperature" and (values[~np.isnan(values)] < 0).any():
            raise DataError(f"negative {self.kind} value")
        object.__setattr__(self, "timestamps", stamps)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.values)

    def to_series(self) -> pd.Series:
        return pd.Series(np.array(self.values), index=self.timestamps, name=self.kind)


@dataclass(frozen=True, eq=False)
class DailyLoadMatrix:
    """N x D power samples (kW), one column per calendar day."""

    samples: np.ndarray
    day_dates: tuple
    dropped_days: tuple = field(default=())

    def __post_init__(self) -> None:
        samples = _readonly(self.samples)
        dates = tuple(self.day_dates)
        if samples.ndim != 2 or samples.shape[1] != len(dates):
            raise DataError(f"matrix shape {samples.shape} does not match {len(dates)} dates")
        if not np.isfinite(samples).all():
            raise DataError("day matrix contains non-finite values")
        if (samples < 0).any():
            raise DataError("day matrix contains negative power")
        if list(dates) != sorted(set(dates)):
            raise DataError("day dates must be unique and sorted")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "day_dates", dates)
        object.__setattr__(self, "dropped_days", tuple(self.dropped_days))

    @property
    def samples_per_day(self) -> int:
        return self.samples.shape[0]

    @property
    def n_days(self) -> int:
        return self.samples.shape[1]

    def column(self, day: date) -> np.ndarray:
        return self.samples[:, self.day_dates.index(day)]

    def select(self, days: Sequence[date]) -> "DailyLoadMatrix":
        wanted = sorted(days)
        idx = [self.day_dates.index(d) for d in wanted]
        return DailyLoadMatrix(self.samples[:, idx], tuple(wanted))

    def timestamps(self) -> pd.DatetimeIndex:
        step = MINUTES_PER_DAY // self.samples_per_day
        return pd.DatetimeIndex(
            [
                pd.Timestamp(d) + pd.Timedelta(minutes=step * i)
                for d in self.day_dates
                for i in range(self.samples_per_day)
            ]
        )

    def to_series(self, name: str = "kw") -> pd.Series:
        """Flatten back to one series in day-major order."""
        return pd.Series(self.samples.T.ravel(), index=self.timestamps(), name=name)


@dataclass(frozen=True, eq=False)
class TemperatureMatrix:
    """24 x D hourly outdoor temperatures (°C)."""

    temps: np.ndarray
    day_dates: tuple

    def __post_init__(self) -> None:
        temps = _readonly(self.temps)
        dates = tuple(self.day_dates)
        if temps.ndim != 2 or temps.shape != (24, len(dates)):
            raise DataError(f"temperature matrix must be 24 x {len(dates)}, got {temps.shape}")
        if not np.isfinite(temps).all():
            raise DataError("temperature matrix contains non-finite values")
        if temps.size and (temps.min() < TEMP_MIN_C or temps.max() > TEMP_MAX_C):
            raise DataError(f"temperature outside [{TEMP_MIN_C}, {TEMP_MAX_C}] °C")
        object.__setattr__(self, "temps", temps)
        object.__setattr__(self, "day_dates", dates)

    def column(self, day: date) -> np.ndarray:
        return self.temps[:, self.day_dates.index(day)]

    def select(self, days: Sequence[date]) -> "TemperatureMatrix":
        wanted = sorted(days)
        idx = [self.day_dates.index(d) for d in wanted]
        return TemperatureMatrix(self.temps[:, idx], tuple(wanted))

    def daily_max(self) -> np.ndarray:
        return self.temps.max(axis=0)


@contextmanager
def open_source(source: Source, timeout: int = HTTP_TIMEOUT) -> Iterator[IO[bytes]]:
    """Yield a byte stream for a path, an http(s) URL or an open stream."""
    if hasattr(source, "read"):
        yield source  # type: ignore[misc]
        return
    location = str(source)
    if location.startswith(("http://", "https://")):
        resp = requests.get(location, timeout=timeout)
        if resp.status_code != 200:
            raise DataError(f"fetching {location} failed: HTTP {resp.status_code} {resp.reason}")
        log.info("fetched %s (%d bytes)", location, len(resp.content))
        yield io.BytesIO(resp.content)
        return
    path = Path(location)
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with path.open("rb") as handle:
        yield handle


def _load_csv(source: Source, value_column: str, kind: str, duplicates: str = "error") -> TimeSeries:
    if duplicates not in ("error", "first"):
        raise ValueError(f"unknown duplicate policy {duplicates!r}")
    with open_source(source) as handle:
        try:
            frame = pd.read_csv(handle, dtype=str, encoding="utf-8", keep_default_na=False)
        except pd.errors.EmptyDataError as exc:
            raise DataError(f"malformed header: expected 'timestamp,{value_column}', file is empty") from exc

    columns = [str(c).strip() for c in frame.columns]
    if columns != ["timestamp", value_column]:
        raise DataError(f"malformed header: expected 'timestamp,{value_column}', got '{','.join(columns)}'")
    frame.columns = columns
    if frame.empty:
        raise DataError("empty series")

    stamps = pd.to_datetime(frame["timestamp"].str.strip(), errors="coerce", format="ISO8601")
    if getattr(stamps.dt, "tz", None) is not None:
        stamps = stamps.dt.tz_localize(None)
    values = pd.to_numeric(frame[value_column].str.strip(), errors="coerce")
    bad = stamps.isna() | values.isna() | ~np.isfinite(values.fillna(0.0))
    if bad.any():
        lines = [int(i) + 2 for i in frame.index[bad]]
        raise DataError(f"unparseable rows at lines {lines[:20]}" + (" ..." if len(lines) > 20 else ""))
    if kind != "temperature" and (values < 0).any():
        lines = [int(i) + 2 for i in frame.index[values < 0]]
        raise DataError(f"negative {value_column} at lines {lines[:20]}")

    series = pd.Series(values.to_numpy(dtype=float), index=pd.DatetimeIndex(stamps)).sort_index(kind="mergesort")
    dup = series.index.duplicated(keep="first")
    if dup.any():
        first = series.index[dup][0]
        if duplicates == "error":
            raise DataError(f"duplicate timestamp {first.isoformat()}")
        log.warning("dropping %d duplicate timestamps (first: %s)", int(dup.sum()), first.isoformat())
        series = series[~dup]
    return TimeSeries(series.index, series.to_numpy(), kind=kind)


def load_power_csv(source: Source, duplicates: str = "error") -> TimeSeries:
    """Parse a `timestamp,kw` CSV into a sorted power series."""
    return _load_csv(source, POWER_COLUMN, "power", duplicates)


def load_temperature_csv(source: Source, duplicates: str = "error") -> TimeSeries:
    return _load_csv(source, TEMPERATURE_COLUMN, "temperature", duplicates)


def load_truth_csv(source: Source, duplicates: str = "error") -> TimeSeries:
    return _load_csv(source, TRUTH_COLUMN, "hvac", duplicates)


def _interval_minutes(interval: Union[int, str, timedelta, pd.Timedelta]) -> int:
    if isinstance(interval, (int, np.integer)):
        minutes = float(interval)
    else:
        minutes = pd.Timedelta(interval) / pd.Timedelta(minutes=1)
    if minutes <= 0 or minutes != int(minutes) or MINUTES_PER_DAY % int(minutes):
        raise DataError(f"interval of {minutes} minutes does not divide 24 h")
    return int(minutes)


def resample_mean(ts: TimeSeries, interval: Union[int, str, timedelta, pd.Timedelta] = 15) -> TimeSeries:
    """Mean of the samples in each [t, t + interval) bin, bins anchored at midnight.

    Bins without samples come back as NaN.
    """
    minutes = _interval_minutes(interval)
    if len(ts) == 0:
        raise DataError("empty series")
    binned = ts.to_series().resample(f"{minutes}min", origin="start_day", closed="left", label="left").mean()
    return TimeSeries(binned.index, binned.to_numpy(), kind=ts.kind, interval_minutes=minutes)


def _day_grid(series: pd.Series, minutes: int) -> tuple[np.ndarray, list[date]]:
    first = series.index[0].normalize()
    last = series.index[-1].normalize()
    grid = pd.date_range(first, last + pd.Timedelta(days=1), freq=f"{minutes}min", inclusive="left")
    per_day = MINUTES_PER_DAY // minutes
    cells = series.reindex(grid).to_numpy(dtype=float).reshape(-1, per_day).T
    days = [d.date() for d in pd.date_range(first, last, freq="D")]
    return cells, days


def build_day_matrix(
    ts: TimeSeries, max_missing_fraction: float = 0.05, samples_per_day: int = SAMPLES_PER_DAY
) -> DailyLoadMatrix:
    """Cut a resampled power series into day columns.

    Days with at most `max_missing_fraction` missing bins are kept and their
    gaps linearly interpolated; the rest are dropped and listed on the result.
    """
    if MINUTES_PER_DAY % samples_per_day:
        raise DataError(f"{samples_per_day} samples per day does not tile 24 h")
    minutes = MINUTES_PER_DAY // samples_per_day
    series = resample_mean(ts, minutes).to_series()
    cells, days = _day_grid(series, minutes)

    kept_cols, kept_days, dropped = [], [], []
    for j, day in enumerate(days):
        col = cells[:, j]
        missing = int(np.isnan(col).sum())
        if missing == samples_per_day or missing > max_missing_fraction * samples_per_day:
            dropped.append(day)
            continue
        if missing:
            col = pd.Series(col).interpolate(method="linear", limit_direction="both").to_numpy()
        kept_cols.append(col)
        kept_days.append(day)

    if dropped:
        log.warning("dropped %d day(s) with too many missing bins: %s", len(dropped), [d.isoformat() for d in dropped])
    if not kept_cols:
        raise DataError("no usable days in power series")
    return DailyLoadMatrix(np.column_stack(kept_cols), tuple(kept_days), tuple(dropped))


def build_temperature_matrix(
    ts: TimeSeries, day_dates: Sequence[date], max_missing_hours: int = 6
) -> TemperatureMatrix:
    """Hourly 24 x D temperature matrix aligned with `day_dates`."""
    hourly = resample_mean(ts, 60).to_series()
    cols = []
    for day in day_dates:
        grid = pd.date_range(pd.Timestamp(day), periods=24, freq="h")
        col = hourly.reindex(grid)
        missing = int(col.isna().sum())
        if missing == 24:
            raise DataError(f"temperature series does not cover {day.isoformat()}")
        if missing > max_missing_hours:
            raise DataError(f"{day.isoformat()}: {missing} missing temperature hours (max {max_missing_hours})")
        if missing:
            col = col.reset_index(drop=True).interpolate(method="linear", limit_direction="both")
        cols.append(col.to_numpy(dtype=float))
    return TemperatureMatrix(np.column_stack(cols) if cols else np.empty((24, 0)), tuple(day_dates))


def write_series_csv(path: Path, series: pd.Series, value_column: str, float_format: str = "%.6f") -> None:
    """Write one of the three input CSV formats."""
    frame = pd.DataFrame(
        {"timestamp": series.index.strftime("%Y-%m-%dT%H:%M:%S"), value_column: series.to_numpy()}
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=float_format, lineterminator="\n")
