#!/usr/bin/env python3
"""
Day-level preprocessing: LIUL spike removal, hot/mild day classification
and residual-profile ensembles.

LIUL (large infrequently used loads: dryers, water heaters) show up in
15-minute data as tall, short rectangles. They are cut out before any
mild-day subtraction so they do not leak into the HVAC estimate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import date
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from scipy.ndimage import maximum_filter1d
from scipy.stats import ks_2samp

from disagg_errors import ConfigError, DataError
from meter_ingestion import DailyLoadMatrix, TemperatureMatrix

log = logging.getLogger(__name__)

MIN_ENSEMBLE = 3


class Label(str, Enum):
    HOT = "Hot"
    MILD = "Mild"
    EXCLUDED = "Excluded"


@dataclass(frozen=True)
class LiulParams:
    min_jump_kw: float = 2.0
    max_duration_slots: int = 12
    # a fall counts as the end of a pulse when it is at least this share of the rise
    fall_ratio: float = 0.5
    rarity_max_fraction: float = 0.2
    rarity_window_slots: int = 2

    def __post_init__(self) -> None:
        if self.min_jump_kw <= 0 or self.max_duration_slots < 1:
            raise ConfigError("liul: min_jump_kw must be > 0 and max_duration_slots >= 1")
        if not 0 < self.fall_ratio <= 1 or not 0 < self.rarity_max_fraction <= 1:
            raise ConfigError("liul: fall_ratio and rarity_max_fraction must lie in (0, 1]")
        if self.rarity_window_slots < 0:
            raise ConfigError("liul: rarity_window_slots must be >= 0")


@dataclass(frozen=True)
class ClassifyParams:
    hot_max_c: float = 29.4
    mild_lo_c: float = 12.8
    mild_hi_c: float = 21.1
    max_ks: float = 0.30
    min_mild_days: int = MIN_ENSEMBLE

    def __post_init__(self) -> None:
        if not self.mild_lo_c <= self.mild_hi_c < self.hot_max_c:
            raise ConfigError("classify: need mild_lo_c <= mild_hi_c < hot_max_c")
        if not 0 < self.max_ks <= 1:
            raise ConfigError("classify: max_ks must lie in (0, 1]")
        if self.min_mild_days < MIN_ENSEMBLE:
            raise ConfigError(f"classify: min_mild_days must be >= {MIN_ENSEMBLE}")


@dataclass(frozen=True)
class EnsembleParams:
    # mild days subtracted from each hot day
    k_use: int = 10

    def __post_init__(self) -> None:
        if self.k_use < MIN_ENSEMBLE:
            raise ConfigError(f"ensemble: k_use must be >= {MIN_ENSEMBLE}")


@dataclass(frozen=True)
class DayLabel:
    date: date
    label: Label
    reasons: tuple
    ks_stat: Optional[float] = None


@dataclass(frozen=True)
class LiulEvent:
    date: Optional[date]
    start_index: int
    end_index: int
    magnitude: float
    appliance_hint: str


@dataclass(frozen=True, eq=False)
class ResidualEnsemble:
    """Hot-day profile minus each of K mild-day profiles (columns)."""

    residuals: np.ndarray
    hot_date: date
    mild_dates: tuple
    mild_profiles: np.ndarray


def _find_pulses(profile: np.ndarray, params: LiulParams) -> list[tuple[int, int, float]]:
    """Rectangular pulses as (first slot, last slot, rise in kW)."""
    pulses = []
    n = len(profile)
    i = 1
    while i < n:
        rise = profile[i] - profile[i - 1]
        if rise < params.min_jump_kw:
            i += 1
            continue
        end = None
        for j in range(i + 1, min(n - 1, i + params.max_duration_slots) + 1):
            if profile[j - 1] - profile[j] >= params.fall_ratio * rise:
                end = j
                break
        if end is None:
            i += 1
            continue
        pulses.append((i, end - 1, float(rise)))
        i = end
    return pulses


def _hint(duration: int, magnitude: float) -> str:
    if duration <= 4 and magnitude >= 3.5:
        return "water heater"
    return "dryer"


def filter_liul(
    profile: np.ndarray,
    params: LiulParams = LiulParams(),
    jump_frequency: Optional[np.ndarray] = None,
    day: Optional[date] = None,
) -> tuple[np.ndarray, list[LiulEvent]]:
    """Replace detected LIUL pulses by a straight line between their edges.

    `jump_frequency[i]` is the share of days showing a qualifying rise near
    slot i; pulses starting at slots where that share reaches
    `params.rarity_max_fraction` are regular loads and are kept.
    """
    original = np.asarray(profile, dtype=float)
    filtered = original.copy()
    events: list[LiulEvent] = []
    for start, end, rise in _find_pulses(original, params):
        if jump_frequency is not None and jump_frequency[start] >= params.rarity_max_fraction:
            continue
        lo, hi = original[start - 1], original[end + 1]
        span = end + 2 - start
        ramp = lo + (hi - lo) * np.arange(1, span) / span
        filtered[start : end + 1] = np.minimum(original[start : end + 1], ramp)
        events.append(LiulEvent(day, start, end, rise, _hint(end - start + 1, rise)))
    return filtered, events


def jump_frequency(samples: np.ndarray, params: LiulParams) -> np.ndarray:
    """Per-slot share of days with a rise >= min_jump_kw within the rarity window."""
    rises = np.zeros(samples.shape, dtype=bool)
    rises[1:] = np.diff(samples, axis=0) >= params.min_jump_kw
    size = 2 * params.rarity_window_slots + 1
    near = maximum_filter1d(rises.astype(np.uint8), size=size, axis=0, mode="constant") > 0
    return near.mean(axis=1)


def filter_liul_matrix(
    matrix: DailyLoadMatrix, params: LiulParams = LiulParams()
) -> tuple[DailyLoadMatrix, list[LiulEvent]]:
    """filter_liul over every day, with the rarity test taken across the days."""
    freq = jump_frequency(matrix.samples, params)
    cols, events = [], []
    for j, day in enumerate(matrix.day_dates):
        col, found = filter_liul(matrix.samples[:, j], params, freq, day)
        cols.append(col)
        events.extend(found)
    if events:
        log.info("removed %d LIUL pulse(s) over %d day(s)", len(events), matrix.n_days)
    return DailyLoadMatrix(np.column_stack(cols), matrix.day_dates, matrix.dropped_days), events


def verify_mild_distribution(
    candidate: np.ndarray, mild_pool_samples: np.ndarray, max_ks: float = 0.30
) -> tuple[bool, float]:
    """Two-sample KS statistic between a candidate day and the mild pool."""
    pool = np.asarray(mild_pool_samples, dtype=float).ravel()
    if pool.size == 0:
        raise DataError("mild pool is empty")
    stat = float(ks_2samp(np.asarray(candidate, dtype=float).ravel(), pool, method="asymp").statistic)
    return stat <= max_ks, stat


def classify_days(
    loads: DailyLoadMatrix, temps: TemperatureMatrix, thresholds: ClassifyParams = ClassifyParams()
) -> list[DayLabel]:
    """Hot / Mild / Excluded label per day from daily max temperature plus a
    power-distribution check on the mild candidates."""
    if loads.day_dates != temps.day_dates:
        raise DataError("load and temperature matrices cover different days")
    tmax = temps.daily_max()
    labels: dict[int, DayLabel] = {}
    candidates = []
    for j, day in enumerate(loads.day_dates):
        if tmax[j] >= thresholds.hot_max_c:
            labels[j] = DayLabel(day, Label.HOT, ("temperature-hot",))
        elif thresholds.mild_lo_c <= tmax[j] <= thresholds.mild_hi_c:
            candidates.append(j)
        else:
            labels[j] = DayLabel(day, Label.EXCLUDED, ("temperature-band",))

    for j in candidates:
        others = [k for k in candidates if k != j] or [j]
        ok, stat = verify_mild_distribution(loads.samples[:, j], loads.samples[:, others], thresholds.max_ks)
        day = loads.day_dates[j]
        if ok:
            labels[j] = DayLabel(day, Label.MILD, ("temperature-mild", "distribution-verified"), stat)
        else:
            labels[j] = DayLabel(day, Label.EXCLUDED, ("temperature-mild", "distribution-mismatch"), stat)

    result = [labels[j] for j in range(loads.n_days)]
    n_mild = sum(1 for lab in result if lab.label is Label.MILD)
    if n_mild < thresholds.min_mild_days:
        raise DataError(
            f"only {n_mild} mild day(s) survive classification (need {thresholds.min_mild_days}); "
            "widen the mild temperature band or raise max_ks"
        )
    return result


def build_residual_ensemble(
    hot_profile: np.ndarray, mild: DailyLoadMatrix, hot_date: date, k_use: int = 10
) -> ResidualEnsemble:
    """Subtract the k_use calendar-nearest mild days from the hot-day profile."""
    if k_use < MIN_ENSEMBLE:
        raise ConfigError(f"k_use must be >= {MIN_ENSEMBLE}")
    if mild.n_days < MIN_ENSEMBLE:
        raise DataError(f"residual ensemble needs >= {MIN_ENSEMBLE} mild days, got {mild.n_days}")
    nearest = sorted(range(mild.n_days), key=lambda k: (abs((mild.day_dates[k] - hot_date).days), mild.day_dates[k]))
    chosen = sorted(nearest[: min(k_use, mild.n_days)])
    profiles = mild.samples[:, chosen]
    hot = np.asarray(hot_profile, dtype=float)
    return ResidualEnsemble(
        residuals=hot[:, None] - profiles,
        hot_date=hot_date,
        mild_dates=tuple(mild.day_dates[k] for k in chosen),
        mild_profiles=np.array(profiles),
    )


def labels_to_frame(labels: Sequence[DayLabel]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "date": [lab.date.isoformat() for lab in labels],
            "label": [lab.label.value for lab in labels],
            "reasons": [";".join(lab.reasons) for lab in labels],
        }
    )


def days_with(labels: Sequence[DayLabel], label: Label) -> list[date]:
    return [lab.date for lab in labels if lab.label is label]
