#!/usr/bin/env python3
"""
Disaggregation metrics, benchmark estimator and report artifacts.

nMAE follows the per-day normalisation: the absolute error summed over all
N*M samples, divided by the rating and by the number of days M only. Set
`nmae_normalization = "per_sample"` to divide by N*M instead; method
rankings are the same either way, absolute levels are not.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path
from typing import Mapping, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from day_preprocessing import DayLabel, Label  # noqa: E402
from disagg_errors import ConfigError, DataError  # noqa: E402
from hvac_finetune import BivariateGaussian  # noqa: E402
from meter_ingestion import DailyLoadMatrix  # noqa: E402

log = logging.getLogger(__name__)

HOURLY_COLUMNS = ["hour", "min", "q1", "median", "q3", "max"]
SVG_SALT = "hvac-disagg"


@dataclass(frozen=True)
class EvaluationOptions:
    nmae_normalization: str = "per_day"
    rating_percentile: float = 99.0
    nameplate_kw: Optional[float] = None
    hist_bin_width: float = 0.05
    hist_upper: float = 0.5
    hot_kwh_threshold: float = 0.5
    plots: bool = True

    def __post_init__(self) -> None:
        if self.nmae_normalization not in ("per_day", "per_sample"):
            raise ConfigError("evaluation.nmae_normalization must be 'per_day' or 'per_sample'")
        if not 0 < self.rating_percentile <= 100:
            raise ConfigError("evaluation.rating_percentile must lie in (0, 100]")
        if self.nameplate_kw is not None and self.nameplate_kw <= 0:
            raise ConfigError("evaluation.nameplate_kw must be > 0")
        if self.hist_bin_width <= 0 or self.hist_upper <= self.hist_bin_width:
            raise ConfigError("evaluation: need 0 < hist_bin_width < hist_upper")


@dataclass(frozen=True)
class EvalReport:
    method: str
    per_customer_nmae: Mapping[str, float]
    per_customer_nee: Mapping[str, float]
    rating_kw: Mapping[str, float]
    hourly: Mapping[str, pd.DataFrame] = field(default_factory=dict)

    @property
    def nmae_mean(self) -> float:
        return float(np.mean(list(self.per_customer_nmae.values())))

    @property
    def nmae_std(self) -> float:
        values = list(self.per_customer_nmae.values())
        return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0

    @property
    def nee_mean(self) -> float:
        return float(np.mean(list(self.per_customer_nee.values())))


def _as_matrix(values: np.ndarray) -> np.ndarray:
    arr = np.asarray(values, dtype=float)
    return arr[:, None] if arr.ndim == 1 else arr


def _pair(est: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e, t = _as_matrix(est), _as_matrix(truth)
    if e.shape != t.shape:
        raise DataError(f"estimate shape {e.shape} does not match truth shape {t.shape}")
    return e, t


def nmae(est: np.ndarray, truth: np.ndarray, rating_kw: float, normalization: str = "per_day") -> float:
    """Normalised mean absolute error in percent of the rating."""
    if rating_kw <= 0:
        raise DataError(f"rating must be > 0 kW, got {rating_kw}")
    e, t = _pair(est, truth)
    total = float(np.abs(e - t).sum()) / rating_kw
    divisor = t.shape[1] if normalization == "per_day" else t.size
    return 100.0 * total / divisor


def nee(est: np.ndarray, truth: np.ndarray) -> float:
    """Normalised energy error in percent."""
    e, t = _pair(est, truth)
    truth_energy = float(t.sum())
    if truth_energy <= 0:
        raise DataError("ground-truth HVAC energy is zero")
    return 100.0 * abs(float(e.sum()) - truth_energy) / truth_energy


def hourly_error_stats(est: np.ndarray, truth: np.ndarray, rating_kw: float) -> pd.DataFrame:
    """Per-hour error across days: min, quartiles and max (24 rows)."""
    if rating_kw <= 0:
        raise DataError(f"rating must be > 0 kW, got {rating_kw}")
    e, t = _pair(est, truth)
    n, m = t.shape
    per_hour = np.abs(e - t).reshape(24, n // 24, m).sum(axis=1) / rating_kw * 100.0
    q = np.percentile(per_hour, [0, 25, 50, 75, 100], axis=1)
    frame = pd.DataFrame(q.T, columns=HOURLY_COLUMNS[1:])
    frame.insert(0, "hour", np.arange(24))
    return frame


def benchmark_average_mild(hot: DailyLoadMatrix, mild: DailyLoadMatrix) -> np.ndarray:
    """HVAC estimate = hot-day load minus the average mild-day profile, floored at 0."""
    if mild.n_days < 1:
        raise DataError("average-mild benchmark needs at least one mild day")
    if hot.samples_per_day != mild.samples_per_day:
        raise DataError("hot and mild matrices differ in samples per day")
    avg = mild.samples.mean(axis=1)
    return np.maximum(0.0, hot.samples - avg[:, None])


def nmae_histogram(per_customer_nmae: Sequence[float], bin_width: float = 0.05, upper: float = 0.5) -> pd.DataFrame:
    """Counts of fractional nMAE (0.10 == 10 %) in fixed-width bins plus an overflow bin."""
    values = np.asarray(per_customer_nmae, dtype=float)
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise DataError("no nMAE values to histogram")
    if (values < 0).any():
        raise DataError("nMAE values must be >= 0")
    n_bins = int(round(upper / bin_width))
    idx = np.minimum(np.floor(values / bin_width + 1e-9).astype(int), n_bins)
    counts = np.bincount(idx, minlength=n_bins + 1)
    lo = np.arange(n_bins + 1) * bin_width
    hi = np.append(lo[1:], np.inf)
    return pd.DataFrame({"bin_lo": np.round(lo, 10), "bin_hi": np.round(hi, 10), "count": counts})


def rating_kw(truth: Optional[np.ndarray], opts: EvaluationOptions = EvaluationOptions()) -> float:
    """Rating proxy: a high percentile of the truth samples, else the nameplate."""
    if truth is not None and np.size(truth):
        value = float(np.percentile(np.asarray(truth, dtype=float), opts.rating_percentile))
        if value > 0:
            return value
    if opts.nameplate_kw is None:
        raise DataError("cannot derive a rating: truth is all zero and no nameplate_kw configured")
    return float(opts.nameplate_kw)


def label_agreement(
    labels: Sequence[DayLabel], truth_kwh: Mapping[date, float], hot_kwh_threshold: float = 0.5
) -> pd.DataFrame:
    """Compare day labels with what the truth implies.

    Days above the threshold must be Hot, days without HVAC must not be Hot,
    days with a little HVAC must not be Mild.
    """
    rows = []
    for lab in labels:
        if lab.date not in truth_kwh:
            continue
        kwh = float(truth_kwh[lab.date])
        if kwh > hot_kwh_threshold:
            intent, agrees = Label.HOT.value, lab.label is Label.HOT
        elif kwh <= 1e-9:
            intent, agrees = Label.MILD.value, lab.label is not Label.HOT
        else:
            intent, agrees = "Light", lab.label is not Label.MILD
        rows.append({"date": lab.date.isoformat(), "label": lab.label.value, "truth_kwh": kwh,
                     "intent": intent, "agrees": bool(agrees)})
    return pd.DataFrame(rows, columns=["date", "label", "truth_kwh", "intent", "agrees"])


def table1_frame(reports: Sequence[EvalReport]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "method": [r.method for r in reports],
            "nMAE": [r.nmae_mean for r in reports],
            "nEE": [r.nee_mean for r in reports],
            "std_nMAE": [r.nmae_std for r in reports],
        }
    )


def table2_frame(rows: Mapping[str, BivariateGaussian]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "method": name,
                "mu_diurnal": g.mu[0],
                "mu_nocturnal": g.mu[1],
                "sigma_dd": g.sigma[0, 0],
                "sigma_dn": g.sigma[0, 1],
                "sigma_nn": g.sigma[1, 1],
            }
            for name, g in rows.items()
        ]
    )


def write_csv(frame: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")


def _save_svg(fig: plt.Figure, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context({"svg.hashsalt": SVG_SALT}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_hourly_boxplot(stats: pd.DataFrame, path: Path, title: str = "") -> None:
    boxes = [
        {"label": f"{int(r.hour):02d}", "whislo": r["min"], "q1": r["q1"], "med": r["median"], "q3": r["q3"],
         "whishi": r["max"], "fliers": []}
        for _, r in stats.iterrows()
    ]
    fig, ax = plt.subplots(figsize=(10, 4))
    ax.bxp(boxes, showfliers=False)
    ax.set_xlabel("Hour of day")
    ax.set_ylabel("nMAE (%)")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    _save_svg(fig, path)


def plot_nmae_histogram(hist: pd.DataFrame, path: Path) -> None:
    """One bar series per method; the overflow bin is drawn one width past the last edge."""
    fig, ax = plt.subplots(figsize=(6, 4))
    methods = list(dict.fromkeys(hist["method"]))
    for i, method in enumerate(methods):
        part = hist[hist["method"] == method]
        width = float((part["bin_hi"] - part["bin_lo"]).replace(np.inf, np.nan).dropna().iloc[0])
        offset = width * (i + 0.5) / len(methods)
        ax.bar(part["bin_lo"] + offset, part["count"], width=width / len(methods), label=method)
    ax.set_xlabel("nMAE")
    ax.set_ylabel("Customers")
    ax.legend()
    fig.tight_layout()
    _save_svg(fig, path)
