#!/usr/bin/env python3
"""
Pipeline configuration: one JSON file, one frozen dataclass per section.

Missing keys take the defaults below; unknown keys are rejected. The fully
resolved configuration is written into every run directory.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Optional

from day_preprocessing import ClassifyParams, EnsembleParams, LiulParams
from disagg_errors import ConfigError
from disagg_evaluation import EvaluationOptions
from household_synth import SynthConfig
from hvac_finetune import FineTuneConfig, SolverOptions
from residual_ica import IcaOptions

log = logging.getLogger(__name__)

WORKERS_ENV = "HVAC_DISAGG_WORKERS"
RESOLVED_NAME = "resolved_config.json"


@dataclass(frozen=True)
class DataConfig:
    """Where customer CSVs live: a directory or an http(s) base URL."""

    corpus_dir: str = "corpus"
    # empty: read ids from manifest.json, else every *_power.csv in corpus_dir
    customers: tuple = ()
    power_suffix: str = "_power.csv"
    temperature_suffix: str = "_temperature.csv"
    truth_suffix: str = "_hvac.csv"
    duplicates: str = "error"
    max_missing_fraction: float = 0.05
    max_missing_temp_hours: int = 6

    def __post_init__(self) -> None:
        object.__setattr__(self, "customers", tuple(str(c) for c in self.customers))
        if self.duplicates not in ("error", "first"):
            raise ConfigError("data.duplicates must be 'error' or 'first'")
        if not 0 <= self.max_missing_fraction < 1:
            raise ConfigError("data.max_missing_fraction must lie in [0, 1)")
        if not 0 <= self.max_missing_temp_hours < 24:
            raise ConfigError("data.max_missing_temp_hours must lie in [0, 24)")

    @property
    def is_remote(self) -> bool:
        return self.corpus_dir.startswith(("http://", "https://"))

    def location(self, customer: str, suffix: str) -> str:
        if self.is_remote:
            return f"{self.corpus_dir.rstrip('/')}/{customer}{suffix}"
        return str(Path(self.corpus_dir) / f"{customer}{suffix}")


@dataclass(frozen=True)
class PipelineConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    classify: ClassifyParams = field(default_factory=ClassifyParams)
    liul: LiulParams = field(default_factory=LiulParams)
    ensemble: EnsembleParams = field(default_factory=EnsembleParams)
    ica: IcaOptions = field(default_factory=IcaOptions)
    finetune: FineTuneConfig = field(default_factory=FineTuneConfig)
    evaluation: EvaluationOptions = field(default_factory=EvaluationOptions)
    output_dir: str = "runs/latest"
    seed: int = 0
    workers: int = 1

    def __post_init__(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError("workers must be an integer >= 1")


NESTED = {"solver": SolverOptions}


def _build(cls: type, raw: Any, where: str) -> Any:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        section = SECTIONS.get(name) if cls is PipelineConfig else NESTED.get(name)
        if section is not None:
            value = _build(section, value, f"{where}.{name}" if where else name)
        elif isinstance(value, list):
            value = tuple(tuple(v) if isinstance(v, list) else v for v in value)
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


SECTIONS = {
    "data": DataConfig,
    "synth": SynthConfig,
    "classify": ClassifyParams,
    "liul": LiulParams,
    "ensemble": EnsembleParams,
    "ica": IcaOptions,
    "finetune": FineTuneConfig,
    "evaluation": EvaluationOptions,
}


def config_from_dict(raw: dict) -> PipelineConfig:
    return _build(PipelineConfig, raw, "")


def load_config(path: Optional[Path]) -> PipelineConfig:
    """Read a JSON config; no path means all defaults."""
    if path is None:
        return PipelineConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


def resolve_config(
    cfg: PipelineConfig,
    out: Optional[str] = None,
    seed: Optional[int] = None,
    workers: Optional[int] = None,
) -> PipelineConfig:
    """Apply command-line overrides; workers fall back to the environment."""
    changes: dict = {}
    if out is not None:
        changes["output_dir"] = str(out)
    if seed is not None:
        changes["seed"] = seed
    if workers is None and os.getenv(WORKERS_ENV):
        try:
            workers = int(os.getenv(WORKERS_ENV, ""))
        except ValueError as exc:
            raise ConfigError(f"{WORKERS_ENV} must be an integer") from exc
    if workers is not None:
        changes["workers"] = workers
    return replace(cfg, **changes) if changes else cfg


def config_to_dict(cfg: Any) -> dict:
    if not is_dataclass(cfg):
        raise TypeError("expected a config dataclass")
    return json.loads(json.dumps(asdict(cfg), ensure_ascii=False))


def dump_config(cfg: PipelineConfig, directory: Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / RESOLVED_NAME
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config_to_dict(cfg), f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
    return path
