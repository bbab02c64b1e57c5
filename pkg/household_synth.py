#!/usr/bin/env python3
"""
Seeded synthetic households with sub-metered ground truth.

Each household is a single-zone RC building cooled by an on/off air
conditioner under a hysteresis thermostat. Envelope conductance grows with
outdoor temperature (infiltration and solar gain), so steady cooling power
is quadratic in temperature. The thermostat runs on one-minute steps and
reports the mean power of each 15-minute slot. The base load is a typical
day shape shifted by a daily routine offset, plus a fridge cycle, noise
and the odd dryer or water-heater pulse. The corpus writer emits the same
CSV formats meter_ingestion reads.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import date, datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from disagg_errors import ConfigError
from meter_ingestion import (
    POWER_COLUMN,
    SAMPLES_PER_DAY,
    TEMPERATURE_COLUMN,
    TRUTH_COLUMN,
    DailyLoadMatrix,
    TemperatureMatrix,
    write_series_csv,
)

log = logging.getLogger(__name__)

SLOT_HOURS = 24.0 / SAMPLES_PER_DAY


class DayProfile(str, Enum):
    HOT = "Hot"
    MILD = "Mild"
    SHOULDER = "Shoulder"


PEAK_RANGE_C = {DayProfile.HOT: (32.0, 38.0), DayProfile.MILD: (16.0, 21.0), DayProfile.SHOULDER: (23.0, 28.0)}
SWING_RANGE_C = {DayProfile.HOT: (8.0, 12.0), DayProfile.MILD: (6.0, 10.0), DayProfile.SHOULDER: (7.0, 11.0)}
PEAK_HOUR = 17
TEMP_NOISE_C = 0.4
# outdoor temperature at which the envelope conductance equals 1/R
ENVELOPE_REF_C = 30.0
MAX_ROUTINE_SHIFT_H = 2.5


def default_base_shape(samples_per_day: int = SAMPLES_PER_DAY) -> tuple:
    """Residential base day (kW): low overnight, morning and evening peaks."""
    h = np.arange(samples_per_day) * 24.0 / samples_per_day
    shape = (
        0.45
        + 0.6 * np.exp(-(((h - 7.5) / 1.2) ** 2))
        + 0.2 * np.exp(-(((h - 13.0) / 3.0) ** 2))
        + 0.9 * np.exp(-(((h - 19.5) / 2.0) ** 2))
    )
    return tuple(float(x) for x in np.round(shape, 6))


@dataclass(frozen=True)
class HouseholdSpec:
    hvac_rating_kw: float = 3.5
    thermal_resistance: float = 4.0  # degC / kW at ENVELOPE_REF_C
    thermal_capacitance: float = 0.8  # kWh / degC
    setpoint_c: float = 24.0
    deadband_c: float = 0.5
    cop: float = 3.0
    internal_gain_kw: float = 0.0
    substeps: int = 15  # thermostat steps per slot; 1 gives a two-level signal
    base_day_shape: tuple = field(default_factory=default_base_shape)
    base_noise_sigma: float = 0.05
    routine_shift_h: float = 1.0  # std of the daily shift of base_day_shape
    fridge_cycle: tuple = (4, 0.15)  # period in slots, amplitude in kW
    liul_events_per_week: float = 2.0
    seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "base_day_shape", tuple(float(x) for x in self.base_day_shape))
        object.__setattr__(self, "fridge_cycle", (int(self.fridge_cycle[0]), float(self.fridge_cycle[1])))
        if min(self.hvac_rating_kw, self.thermal_resistance, self.thermal_capacitance, self.deadband_c, self.cop) <= 0:
            raise ConfigError("household: rating, R, C, deadband and cop must be > 0")
        if self.substeps < 1:
            raise ConfigError("household: substeps must be >= 1")
        if len(self.base_day_shape) != SAMPLES_PER_DAY or min(self.base_day_shape) < 0:
            raise ConfigError(f"household: base_day_shape must hold {SAMPLES_PER_DAY} values >= 0")
        if min(self.base_noise_sigma, self.liul_events_per_week, self.internal_gain_kw, self.routine_shift_h) < 0:
            raise ConfigError("household: noise, gains, routine shift and LIUL rate must be >= 0")
        if self.fridge_cycle[0] < 2 or self.fridge_cycle[1] < 0:
            raise ConfigError("household: fridge_cycle needs period >= 2 slots and amplitude >= 0")

    def cooling_quadratic(self) -> tuple[float, float]:
        """(gamma1, gamma2) of the steady electric load gamma1*T + gamma2*T^2 in kW.

        Holds while the compressor keeps up and internal_gain_kw is zero.
        """
        gamma2 = 1.0 / (self.thermal_resistance * ENVELOPE_REF_C * self.cop)
        return -self.setpoint_c * gamma2, gamma2


@dataclass(frozen=True)
class SynthConfig:
    households: int = 4
    hot_days: int = 30
    mild_days: int = 12
    shoulder_days: int = 3
    start_date: str = "2023-06-01"
    rating_range_kw: tuple = (2.5, 5.0)
    resistance_range: tuple = (3.0, 5.0)
    capacitance_range: tuple = (0.6, 1.0)
    liul_events_per_week: float = 2.0
    base_noise_sigma: float = 0.05
    routine_shift_h: float = 1.0

    def __post_init__(self) -> None:
        if self.households < 1:
            raise ConfigError("synth: households must be >= 1")
        if min(self.hot_days, self.mild_days, self.shoulder_days) < 0:
            raise ConfigError("synth: day counts must be >= 0")
        if self.hot_days + self.mild_days + self.shoulder_days < 1:
            raise ConfigError("synth: zero days requested")
        try:
            date.fromisoformat(self.start_date)
        except ValueError as exc:
            raise ConfigError(f"synth: bad start_date {self.start_date!r}") from exc
        for name in ("rating_range_kw", "resistance_range", "capacitance_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"synth: {name} must satisfy 0 < lo <= hi")

    @property
    def n_days(self) -> int:
        return self.hot_days + self.mild_days + self.shoulder_days


def derive_seed(seed: int, index: int) -> int:
    """Independent child seed; the same for any worker count."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _day_temperatures(profile: DayProfile, rng: np.random.Generator) -> np.ndarray:
    peak = rng.uniform(*PEAK_RANGE_C[profile])
    swing = rng.uniform(*SWING_RANGE_C[profile])
    hours = np.arange(24)
    temps = peak - swing + swing * (0.5 - 0.5 * np.cos(2 * np.pi * (hours - 5) / 24))
    temps = np.minimum(temps + rng.normal(0.0, TEMP_NOISE_C, 24), peak)
    temps[PEAK_HOUR] = peak
    return temps


def generate_temperature_schedule(
    profiles: Sequence[DayProfile], seed: int, start: date = date(2023, 6, 1)
) -> TemperatureMatrix:
    """Hourly temperatures for consecutive days following the given profiles."""
    if not profiles:
        raise ConfigError("temperature schedule needs at least one day")
    rng = np.random.default_rng(seed)
    cols = [_day_temperatures(DayProfile(p), rng) for p in profiles]
    dates = tuple(start + timedelta(days=i) for i in range(len(profiles)))
    return TemperatureMatrix(np.column_stack(cols), dates)


def generate_temperature(
    days: int, profile: DayProfile, seed: int, start: date = date(2023, 6, 1)
) -> TemperatureMatrix:
    if days < 1:
        raise ConfigError("days must be >= 1")
    return generate_temperature_schedule([profile] * days, seed, start)


def _simulate_thermostat(spec: HouseholdSpec, outdoor: np.ndarray) -> np.ndarray:
    """Compressor duty cycle per slot for (slot, day) outdoor temperatures.

    Days are simulated side by side; each starts at the setpoint with the
    compressor off.
    """
    upper = spec.setpoint_c + spec.deadband_c / 2
    lower = spec.setpoint_c - spec.deadband_c / 2
    cooling_kw = spec.cop * spec.hvac_rating_kw
    dt = SLOT_HOURS / spec.substeps
    conductance = np.maximum(outdoor, 1.0) / (spec.thermal_resistance * ENVELOPE_REF_C)

    indoor = np.full(outdoor.shape[1], spec.setpoint_c)
    running = np.zeros(outdoor.shape[1], dtype=bool)
    on_steps = np.zeros(outdoor.shape)
    for i in range(outdoor.shape[0]):
        for _ in range(spec.substeps):
            running = (indoor > upper) | (running & (indoor >= lower))
            on_steps[i] += running
            heat = conductance[i] * (outdoor[i] - indoor) + spec.internal_gain_kw - cooling_kw * running
            indoor = indoor + dt * heat / spec.thermal_capacitance
    return on_steps / spec.substeps


def _routine_shifted(shape: np.ndarray, shifts_h: np.ndarray) -> np.ndarray:
    """Columns of `shape` moved later in the day by each shift, wrapping at midnight."""
    hours = np.arange(len(shape)) * 24.0 / len(shape)
    return np.column_stack([np.interp(hours - s, hours, shape, period=24.0) for s in shifts_h])


def _liul_pulses(n_days: int, rate_per_week: float, rng: np.random.Generator) -> np.ndarray:
    pulses = np.zeros((SAMPLES_PER_DAY, n_days))
    for j in range(n_days):
        for _ in range(rng.poisson(rate_per_week / 7.0)):
            duration = int(rng.integers(2, 9))
            start = int(rng.integers(1, SAMPLES_PER_DAY - duration - 1))
            pulses[start : start + duration, j] += rng.uniform(2.0, 5.0)
    return pulses


def generate_household(
    spec: HouseholdSpec, temps: TemperatureMatrix
) -> tuple[DailyLoadMatrix, DailyLoadMatrix, DailyLoadMatrix]:
    """(total, hvac_truth, base_truth) day matrices aligned with `temps`."""
    rng = np.random.default_rng(spec.seed)
    n_days = len(temps.day_dates)
    per_hour = SAMPLES_PER_DAY // 24
    outdoor = np.repeat(temps.temps, per_hour, axis=0)
    hvac = _simulate_thermostat(spec, outdoor) * spec.hvac_rating_kw

    period, amplitude = spec.fridge_cycle
    fridge = amplitude * ((np.arange(SAMPLES_PER_DAY) % period) < period // 2)
    shifts = np.clip(rng.normal(0.0, spec.routine_shift_h, n_days), -MAX_ROUTINE_SHIFT_H, MAX_ROUTINE_SHIFT_H)
    shape = _routine_shifted(np.asarray(spec.base_day_shape), shifts) + fridge[:, None]
    base = shape + rng.normal(0.0, spec.base_noise_sigma, (SAMPLES_PER_DAY, n_days))
    base = np.maximum(base, 0.0) + _liul_pulses(n_days, spec.liul_events_per_week, rng)

    dates = temps.day_dates
    return DailyLoadMatrix(hvac + base, dates), DailyLoadMatrix(hvac, dates), DailyLoadMatrix(base, dates)


def household_specs(cfg: SynthConfig, seed: int) -> list[HouseholdSpec]:
    specs = []
    for idx in range(cfg.households):
        rng = np.random.default_rng(derive_seed(seed, idx))
        specs.append(
            HouseholdSpec(
                hvac_rating_kw=round(float(rng.uniform(*cfg.rating_range_kw)), 3),
                thermal_resistance=round(float(rng.uniform(*cfg.resistance_range)), 3),
                thermal_capacitance=round(float(rng.uniform(*cfg.capacitance_range)), 3),
                liul_events_per_week=cfg.liul_events_per_week,
                base_noise_sigma=cfg.base_noise_sigma,
                routine_shift_h=cfg.routine_shift_h,
                seed=derive_seed(seed, 1000 + idx),
            )
        )
    return specs


def corpus_calendar(cfg: SynthConfig, seed: int) -> list[DayProfile]:
    profiles = (
        [DayProfile.HOT] * cfg.hot_days + [DayProfile.MILD] * cfg.mild_days + [DayProfile.SHOULDER] * cfg.shoulder_days
    )
    order = np.random.default_rng(seed).permutation(len(profiles))
    return [profiles[i] for i in order]


def _write_household(name: str, spec: HouseholdSpec, temps: TemperatureMatrix, out_dir: Path) -> dict:
    total, hvac, _ = generate_household(spec, temps)
    files = {
        "power": f"{name}_power.csv",
        "temperature": f"{name}_temperature.csv",
        "hvac": f"{name}_hvac.csv",
    }
    write_series_csv(out_dir / files["power"], total.to_series(), POWER_COLUMN)
    stamps = pd.date_range(pd.Timestamp(temps.day_dates[0]), periods=temps.temps.size, freq="h")
    write_series_csv(
        out_dir / files["temperature"], pd.Series(temps.temps.T.ravel(), index=stamps), TEMPERATURE_COLUMN, float_format="%.3f"
    )
    write_series_csv(out_dir / files["hvac"], hvac.to_series(), TRUTH_COLUMN)
    energy = hvac.samples.sum(axis=0) * SLOT_HOURS
    return {
        "id": name,
        "seed": spec.seed,
        "files": files,
        "spec": {k: v for k, v in asdict(spec).items() if k != "base_day_shape"},
        "hvac_kwh": {d.isoformat(): round(float(e), 6) for d, e in zip(hvac.day_dates, energy)},
    }


def generate_corpus(cfg: SynthConfig, out_dir: Path, seed: int = 0, workers: int = 1) -> dict:
    """Write H<nn>_{power,temperature,hvac}.csv per household plus manifest.json."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out_dir}: {exc}") from exc

    calendar = corpus_calendar(cfg, seed)
    temps = generate_temperature_schedule(calendar, derive_seed(seed, 999_999), date.fromisoformat(cfg.start_date))
    specs = household_specs(cfg, seed)
    names = [f"H{idx + 1:02d}" for idx in range(cfg.households)]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            entries = list(pool.map(_write_household, names, specs, [temps] * len(specs), [out_dir] * len(specs)))
    else:
        entries = [_write_household(n, s, temps, out_dir) for n, s in zip(names, specs)]

    manifest = {
        "created_at": datetime.now().isoformat(timespec="seconds"),
        "seed": seed,
        "synth": asdict(cfg),
        "days": [{"date": d.isoformat(), "intent": p.value} for d, p in zip(temps.day_dates, calendar)],
        "households": entries,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, ensure_ascii=False, indent=2)
    log.info("✅ wrote %d household(s) x %d day(s) to %s", cfg.households, cfg.n_days, out_dir)
    return manifest


def load_manifest(corpus_dir: Path) -> Optional[dict]:
    path = Path(corpus_dir) / "manifest.json"
    if not path.exists():
        return None
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
