#!/usr/bin/env python3
"""
Per-customer disaggregation workflow and corpus-level orchestration.

    classify (raw days) -> LIUL filter -> residual ensembles -> ICA
    -> fine-tune (one or more pdf modes, outer passes) -> run directory

Customers are independent until the fine-tune phase, which needs the mild
statistics pooled over every customer for the MultiUser mode. Results do
not depend on the worker count: every random stream is seeded from the
global seed and the customer's position.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import date
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

from day_preprocessing import (
    DayLabel,
    Label,
    LiulEvent,
    ResidualEnsemble,
    build_residual_ensemble,
    classify_days,
    days_with,
    filter_liul_matrix,
    labels_to_frame,
)
from disagg_config import PipelineConfig
from disagg_errors import ConfigError, DataError
from disagg_evaluation import (
    EvalReport,
    benchmark_average_mild,
    hourly_error_stats,
    label_agreement,
    nee,
    nmae,
    nmae_histogram,
    plot_hourly_boxplot,
    plot_nmae_histogram,
    rating_kw,
    table1_frame,
    table2_frame,
    write_csv,
)
from household_synth import derive_seed, load_manifest
from hvac_finetune import (
    CASE_NAMES,
    BivariateGaussian,
    DisaggregationResult,
    FineTuneConfig,
    PdfMode,
    dump_trace_csv,
    estimate_base_stats,
    fine_tune,
    fit_hourly_bound,
    hourly_energy,
)
from meter_ingestion import (
    DailyLoadMatrix,
    TemperatureMatrix,
    build_day_matrix,
    build_temperature_matrix,
    load_power_csv,
    load_temperature_csv,
    load_truth_csv,
)
from residual_ica import HvacIcaEstimate, IcaModel, dump_sources_csv, run_ica

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CustomerSource:
    customer: str
    power: str
    temperature: str
    truth: str


@dataclass(frozen=True, eq=False)
class CustomerPrep:
    """Everything the fine-tune phase needs for one customer."""

    customer: str
    labels: tuple
    filtered: DailyLoadMatrix
    temps: TemperatureMatrix
    hot_dates: tuple
    mild: DailyLoadMatrix
    ica: dict
    ensembles: dict
    models: dict
    liul_events: tuple
    base_stats: BivariateGaussian
    gamma: tuple


@dataclass(frozen=True, eq=False)
class FineTuneTask:
    prep: CustomerPrep
    cfg: FineTuneConfig
    stats: BivariateGaussian
    candidate_sigma: Optional[np.ndarray] = None
    warm: dict = field(default_factory=dict)


@dataclass(frozen=True)
class RunSummary:
    customers: int
    hot_days: int
    infeasible: tuple

    @property
    def all_feasible(self) -> bool:
        return not self.infeasible


def _map(fn: Callable, items: Sequence, workers: int) -> list:
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


def discover_customers(cfg: PipelineConfig) -> list[CustomerSource]:
    """Customer ids from the config, the corpus manifest or the power files present."""
    data = cfg.data
    ids = list(data.customers)
    if not data.is_remote and not Path(data.corpus_dir).is_dir():
        raise ConfigError(f"corpus directory not found: {data.corpus_dir}")
    if not ids:
        if data.is_remote:
            raise ConfigError("data.customers must be listed for a remote corpus")
        manifest = load_manifest(Path(data.corpus_dir))
        if manifest:
            ids = [h["id"] for h in manifest["households"]]
        else:
            ids = sorted(p.name[: -len(data.power_suffix)] for p in Path(data.corpus_dir).glob(f"*{data.power_suffix}"))
    if not ids:
        raise DataError(f"no customers found in {data.corpus_dir}")
    return [
        CustomerSource(
            c,
            data.location(c, data.power_suffix),
            data.location(c, data.temperature_suffix),
            data.location(c, data.truth_suffix),
        )
        for c in ids
    ]


def _day_seed(base: int, customer_seed: int, day: date) -> int:
    return int(np.random.SeedSequence([base, customer_seed, day.toordinal()]).generate_state(1)[0])


def prepare_customer(source: CustomerSource, cfg: PipelineConfig, index: int) -> CustomerPrep:
    """Ingest, label, filter and run ICA on every hot day of one customer."""
    try:
        loads = build_day_matrix(load_power_csv(source.power, cfg.data.duplicates), cfg.data.max_missing_fraction)
        temps = build_temperature_matrix(
            load_temperature_csv(source.temperature, cfg.data.duplicates),
            loads.day_dates,
            cfg.data.max_missing_temp_hours,
        )
        labels = classify_days(loads, temps, cfg.classify)
        filtered, events = filter_liul_matrix(loads, cfg.liul)
        hot_dates = tuple(days_with(labels, Label.HOT))
        if not hot_dates:
            raise DataError("no hot days")
        mild = filtered.select(days_with(labels, Label.MILD))

        customer_seed = derive_seed(cfg.seed, index)
        ica: dict[date, HvacIcaEstimate] = {}
        ensembles: dict[date, ResidualEnsemble] = {}
        models: dict[date, IcaModel] = {}
        for day in hot_dates:
            ensemble = build_residual_ensemble(filtered.column(day), mild, day, cfg.ensemble.k_use)
            opts = replace(cfg.ica, seed=_day_seed(cfg.ica.seed, customer_seed, day))
            models[day], ica[day] = run_ica(ensemble, temps.column(day), opts)
            ensembles[day] = ensemble

        stats = estimate_base_stats(mild.samples, cfg.finetune)
        hot_temps = temps.select(hot_dates)
        gamma = fit_hourly_bound(
            np.concatenate([hourly_energy(ica[d].profile) for d in hot_dates]), hot_temps.temps.T.ravel()
        )
    except DataError as exc:
        raise DataError(f"{source.customer}: {exc}") from exc

    log.info(
        "✅ %s: %d hot / %d mild day(s), %d LIUL pulse(s) removed",
        source.customer, len(hot_dates), mild.n_days, len(events),
    )
    return CustomerPrep(
        customer=source.customer,
        labels=tuple(labels),
        filtered=filtered,
        temps=temps,
        hot_dates=hot_dates,
        mild=mild,
        ica=ica,
        ensembles=ensembles,
        models=models,
        liul_events=tuple(events),
        base_stats=stats,
        gamma=gamma,
    )


def _prepare(args: tuple) -> CustomerPrep:
    return prepare_customer(*args)


def finetune_customer(task: FineTuneTask) -> dict[date, DisaggregationResult]:
    prep = task.prep
    results = {}
    for day in prep.hot_dates:
        results[day] = fine_tune(
            prep.filtered.column(day),
            prep.ica[day].profile,
            prep.ensembles[day].mild_profiles,
            prep.temps.column(day),
            task.stats,
            task.cfg,
            gamma_init=prep.gamma,
            candidate_sigma=task.candidate_sigma,
            warm_start=task.warm.get(day),
        )
    return results


def run_mode(
    preps: Sequence[CustomerPrep], cfg: PipelineConfig, mode: PdfMode, pooled: BivariateGaussian
) -> dict[str, dict[date, DisaggregationResult]]:
    """Fine-tune every hot day for one pdf mode.

    Each outer pass warm-starts from the previous one; from the second
    pass on, the candidate covariance comes from the customer's fine-tuned
    base profiles.
    """
    mode_cfg = replace(cfg.finetune, pdf_mode=mode, cases=())
    passes = 1 if mode is PdfMode.OFF else cfg.finetune.outer_passes
    results: dict[str, dict[date, DisaggregationResult]] = {p.customer: {} for p in preps}
    sigma: dict[str, Optional[np.ndarray]] = {p.customer: None for p in preps}
    for pass_no in range(1, passes + 1):
        tasks = [
            FineTuneTask(
                prep=p,
                cfg=mode_cfg,
                stats=pooled if mode is PdfMode.MULTI_USER else p.base_stats,
                candidate_sigma=sigma[p.customer],
                warm={d: r.final_vars for d, r in results[p.customer].items()},
            )
            for p in preps
        ]
        for prep, res in zip(preps, _map(finetune_customer, tasks, cfg.workers)):
            results[prep.customer] = res
            if len(res) >= 3:
                bases = np.column_stack([r.base_hat for r in res.values()])
                sigma[prep.customer] = estimate_base_stats(bases, mode_cfg).sigma
        log.info("fine-tune %s pass %d/%d done", mode.value, pass_no, passes)
    return results


def _liul_frame(events: Sequence[LiulEvent]) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {"date": e.date.isoformat() if e.date else "", "start_index": e.start_index, "end_index": e.end_index,
             "magnitude_kw": e.magnitude, "appliance_hint": e.appliance_hint}
            for e in events
        ],
        columns=["date", "start_index", "end_index", "magnitude_kw", "appliance_hint"],
    )


def write_customer(
    run_dir: Path,
    prep: CustomerPrep,
    by_mode: dict[PdfMode, dict[date, DisaggregationResult]],
    cfg: PipelineConfig,
) -> list[dict]:
    """Day CSVs, labels and debug dumps for one customer; returns summary rows."""
    base_dir = run_dir / prep.customer
    write_csv(labels_to_frame(prep.labels), base_dir / "labels.csv")
    write_csv(_liul_frame(prep.liul_events), base_dir / "liul_events.csv")

    primary = cfg.finetune.pdf_mode
    hot = prep.filtered.select(prep.hot_dates)
    average = benchmark_average_mild(hot, prep.mild)
    rows = []
    for j, day in enumerate(prep.hot_dates):
        frame = pd.DataFrame(
            {
                "slot": np.arange(hot.samples_per_day),
                "timestamp": hot.select([day]).timestamps().strftime("%Y-%m-%dT%H:%M:%S"),
                "total_kw": hot.samples[:, j],
                "average_kw": average[:, j],
                "ica_kw": prep.ica[day].profile,
                "hvac_kw": by_mode[primary][prep.customer][day].hvac_hat,
                "base_kw": by_mode[primary][prep.customer][day].base_hat,
            }
        )
        for mode, results in by_mode.items():
            if mode is not primary:
                frame[f"hvac_kw_{mode.value}"] = results[prep.customer][day].hvac_hat
                frame[f"base_kw_{mode.value}"] = results[prep.customer][day].base_hat
        write_csv(frame, base_dir / "days" / f"{day.isoformat()}.csv")
        if cfg.ica.dump_sources:
            dump_sources_csv(base_dir / "ica" / f"{day.isoformat()}.csv", prep.models[day])

        estimate = prep.ica[day]
        for mode, results in by_mode.items():
            res = results[prep.customer][day]
            if cfg.finetune.dump_traces:
                dump_trace_csv(base_dir / "traces" / f"{day.isoformat()}_{mode.value}.csv", res)
            rows.append(
                {
                    "customer": prep.customer,
                    "date": day.isoformat(),
                    "mode": mode.value,
                    "feasible": res.feasible,
                    "converged": res.converged,
                    "iterations": res.iterations,
                    "settled_hours": res.settled_hours,
                    "max_hourly_deviation": res.max_hourly_deviation,
                    "alpha": res.alpha,
                    "gamma1": res.gamma[0],
                    "gamma2": res.gamma[1],
                    "ica_component": estimate.component_index,
                    "ica_correlation": estimate.correlation,
                    "weak_linkage": estimate.weak_linkage,
                }
            )
    return rows


def disaggregate(cfg: PipelineConfig, run_dir: Path) -> RunSummary:
    """Run the full workflow over every customer and write the run directory."""
    sources = discover_customers(cfg)
    log.info("📊 disaggregating %d customer(s) with %d worker(s)", len(sources), cfg.workers)
    preps = _map(_prepare, [(s, cfg, i) for i, s in enumerate(sources)], cfg.workers)

    pooled = estimate_base_stats(np.column_stack([p.mild.samples for p in preps]), cfg.finetune)
    by_mode = {mode: run_mode(preps, cfg, mode, pooled) for mode in cfg.finetune.all_modes}

    rows = []
    for prep in preps:
        rows.extend(write_customer(run_dir, prep, by_mode, cfg))
    summary = pd.DataFrame(rows)
    write_csv(summary, run_dir / "summary.csv")

    infeasible = tuple(
        f"{r['customer']} {r['date']} {r['mode']}" for r in rows if not r["feasible"]
    )
    for item in infeasible:
        log.warning("⚠️ infeasible fine-tune result: %s", item)
    return RunSummary(len(preps), sum(len(p.hot_dates) for p in preps), infeasible)


def nmae_mean(reports: Sequence[EvalReport], method: str) -> float:
    return next(r.nmae_mean for r in reports if r.method == method)


def _method_name(mode: PdfMode) -> str:
    return f"{CASE_NAMES[mode]} ({mode.value})"


def _read_labels(path: Path) -> list[DayLabel]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    return [
        DayLabel(date.fromisoformat(r.date), Label(r.label), tuple(r.reasons.split(";")) if r.reasons else ())
        for r in frame.itertuples(index=False)
    ]


def _load_truth(cfg: PipelineConfig, customer: str) -> DailyLoadMatrix:
    location = cfg.data.location(customer, cfg.data.truth_suffix)
    if not cfg.data.is_remote and not Path(location).exists():
        raise DataError(f"missing truth file for customer {customer}: {location}")
    series = load_truth_csv(location, cfg.data.duplicates)
    return build_day_matrix(series, cfg.data.max_missing_fraction)


def evaluate(cfg: PipelineConfig, run_dir: Path) -> dict[str, pd.DataFrame]:
    """Score a disaggregation run against sub-metered truth and write the report tables."""
    summary_path = run_dir / "summary.csv"
    if not summary_path.exists():
        raise DataError(f"no disaggregation results in {run_dir}; run disaggregate first")
    customers = list(dict.fromkeys(pd.read_csv(summary_path, dtype=str)["customer"]))
    opts = cfg.evaluation
    modes = cfg.finetune.all_modes
    columns = {"Average": "average_kw", "ICA": "ica_kw"}
    for mode in modes:
        columns[_method_name(mode)] = "hvac_kw" if mode is cfg.finetune.pdf_mode else f"hvac_kw_{mode.value}"
    proposed = _method_name(cfg.finetune.pdf_mode)

    nmae_by = {m: {} for m in columns}
    nee_by = {m: {} for m in columns}
    ratings: dict[str, float] = {}
    hourly: dict[str, pd.DataFrame] = {}
    actual_base, ica_base, proposed_base, checks = [], [], [], []
    for customer in customers:
        day_files = sorted((run_dir / customer / "days").glob("*.csv"))
        frames = [pd.read_csv(p) for p in day_files]
        dates = [date.fromisoformat(p.stem) for p in day_files]
        truth_all = _load_truth(cfg, customer)
        missing = [d for d in dates if d not in truth_all.day_dates]
        if missing:
            raise DataError(f"truth for customer {customer} lacks {missing[0].isoformat()}")
        truth = truth_all.select(dates).samples
        ratings[customer] = rating_kw(truth_all.samples, opts)
        for method, col in columns.items():
            est = np.column_stack([f[col].to_numpy() for f in frames])
            nmae_by[method][customer] = nmae(est, truth, ratings[customer], opts.nmae_normalization)
            nee_by[method][customer] = nee(est, truth)
        est = np.column_stack([f["hvac_kw"].to_numpy() for f in frames])
        hourly[customer] = hourly_error_stats(est, truth, ratings[customer])

        total = np.column_stack([f["total_kw"].to_numpy() for f in frames])
        actual_base.append(total - truth)
        ica_base.append(total - np.column_stack([f["ica_kw"].to_numpy() for f in frames]))
        proposed_base.append(np.column_stack([f["base_kw"].to_numpy() for f in frames]))

        truth_kwh = dict(zip(truth_all.day_dates, truth_all.samples.sum(axis=0) * 24.0 / truth_all.samples_per_day))
        check = label_agreement(_read_labels(run_dir / customer / "labels.csv"), truth_kwh, opts.hot_kwh_threshold)
        check.insert(0, "customer", customer)
        checks.append(check)

    reports = [EvalReport(m, nmae_by[m], nee_by[m], ratings, hourly if m == proposed else {}) for m in columns]
    table1 = table1_frame(reports)
    table2 = table2_frame(
        {
            "Actual": estimate_base_stats(np.column_stack(actual_base), cfg.finetune),
            "ICA": estimate_base_stats(np.column_stack(ica_base), cfg.finetune),
            "Proposed": estimate_base_stats(np.column_stack(proposed_base), cfg.finetune),
        }
    )
    ranked = sorted(customers, key=lambda c: (nmae_by[proposed][c], c))
    median_customer = ranked[(len(ranked) - 1) // 2]
    fig6 = hourly[median_customer].copy()
    fig6.insert(0, "customer", median_customer)
    fig8 = pd.concat(
        [
            nmae_histogram(np.array(list(nmae_by[m].values())) / 100.0, opts.hist_bin_width, opts.hist_upper).assign(
                method=m
            )[["method", "bin_lo", "bin_hi", "count"]]
            for m in columns
        ],
        ignore_index=True,
    )
    labels_check = pd.concat(checks, ignore_index=True)

    outputs = {"table1": table1, "table2": table2, "fig6_hourly": fig6, "fig8_hist": fig8,
               "labels_check": labels_check}
    for name, frame in outputs.items():
        write_csv(frame, run_dir / f"{name}.csv")
    if opts.plots:
        render_plots(run_dir)
    agree = float(labels_check["agrees"].mean()) if len(labels_check) else float("nan")
    log.info("✅ evaluated %d customer(s); %s nMAE %.2f %%, label agreement %.1f %%",
             len(customers), proposed, nmae_mean(reports, proposed), 100 * agree)
    return outputs


def render_plots(run_dir: Path) -> list[Path]:
    fig6_path, fig8_path = run_dir / "fig6_hourly.csv", run_dir / "fig8_hist.csv"
    if not fig6_path.exists() or not fig8_path.exists():
        raise DataError(f"no evaluation tables in {run_dir}; run evaluate first")
    fig6 = pd.read_csv(fig6_path)
    plot_hourly_boxplot(fig6, run_dir / "fig6_hourly.svg", title=f"Customer {fig6['customer'].iloc[0]}")
    plot_nmae_histogram(pd.read_csv(fig8_path), run_dir / "fig8_hist.svg")
    return [run_dir / "fig6_hourly.svg", run_dir / "fig8_hist.svg"]


def write_report(cfg: PipelineConfig, run_dir: Path) -> Path:
    """SVG plots plus a plain-text summary of an evaluated run."""
    table1_path = run_dir / "table1.csv"
    if not table1_path.exists():
        raise DataError(f"no evaluation tables in {run_dir}; run evaluate first")
    plots = render_plots(run_dir)
    table1 = pd.read_csv(table1_path)
    table2 = pd.read_csv(run_dir / "table2.csv")
    summary = pd.read_csv(run_dir / "summary.csv")
    primary = summary[summary["mode"] == cfg.finetune.pdf_mode.value]
    lines = [
        "HVAC disaggregation report",
        "=" * 50,
        "",
        "Method comparison (nMAE %, nEE %, std of nMAE):",
        table1.to_string(index=False, float_format=lambda v: f"{v:.2f}"),
        "",
        "Base-load energy distribution (kWh):",
        table2.to_string(index=False, float_format=lambda v: f"{v:.2f}"),
        "",
        f"Fine-tuned days: {len(primary)}, feasible: {int(primary['feasible'].sum())}",
    ]
    labels_path = run_dir / "labels_check.csv"
    if labels_path.exists():
        check = pd.read_csv(labels_path)
        if len(check):
            lines.append(f"Label agreement with truth: {100 * check['agrees'].mean():.1f} %")
    lines += ["", "Plots: " + ", ".join(p.name for p in plots), ""]
    path = run_dir / "report.txt"
    path.write_text("\n".join(lines), encoding="utf-8")
    return path
