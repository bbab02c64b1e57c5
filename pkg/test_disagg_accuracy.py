import json
import logging
import time

import numpy as np
import pandas as pd
import pytest

import hvac_disagg
from disagg_config import load_config
from disagg_errors import EXIT_INFEASIBLE, EXIT_OK
from disagg_pipeline import discover_customers, prepare_customer, run_mode
from hvac_finetune import PdfMode, estimate_base_stats, hourly_energy
from meter_ingestion import build_day_matrix, load_truth_csv

HOUSEHOLDS = 20
HOT_DAYS = 30


@pytest.fixture(autouse=True)
def _reset_logging():
    yield
    root = logging.getLogger()
    for handler in list(root.handlers):
        root.removeHandler(handler)
        handler.close()


@pytest.fixture(scope="module")
def corpus_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus_run")
    corpus, run = root / "corpus", root / "run"
    config = root / "run.json"
    config.write_text(
        json.dumps(
            {
                "data": {"corpus_dir": str(corpus)},
                "synth": {"households": HOUSEHOLDS, "hot_days": HOT_DAYS, "mild_days": 12, "shoulder_days": 3},
                "seed": 21,
            }
        ),
        encoding="utf-8",
    )
    started = time.perf_counter()
    assert hvac_disagg.main(["synth", "--config", str(config), "--out", str(corpus), "--workers", "1"]) == EXIT_OK
    code = hvac_disagg.main(["disaggregate", "--config", str(config), "--out", str(run), "--workers", "1"])
    assert code in (EXIT_OK, EXIT_INFEASIBLE)
    assert hvac_disagg.main(["evaluate", "--config", str(config), "--out", str(run), "--workers", "1"]) == EXIT_OK
    elapsed = time.perf_counter() - started
    return {"root": root, "corpus": corpus, "run": run, "config": config, "elapsed": elapsed}


def _day_errors(corpus_run) -> pd.DataFrame:
    cfg = load_config(corpus_run["config"])
    rows = []
    for customer_dir in sorted(corpus_run["run"].glob("H*")):
        truth_path = corpus_run["corpus"] / f"{customer_dir.name}_hvac.csv"
        truth = build_day_matrix(load_truth_csv(truth_path, cfg.data.duplicates), cfg.data.max_missing_fraction)
        for path in sorted((customer_dir / "days").glob("*.csv")):
            frame = pd.read_csv(path)
            actual = truth.column(pd.Timestamp(path.stem).date())
            rows.append(
                {
                    "customer": customer_dir.name,
                    "date": path.stem,
                    "ica": np.abs(frame["ica_kw"].to_numpy() - actual).sum(),
                    "fine_tuned": np.abs(frame["hvac_kw"].to_numpy() - actual).sum(),
                }
            )
    return pd.DataFrame(rows)


def test_full_corpus_runs_within_five_minutes(corpus_run):
    assert corpus_run["elapsed"] < 300.0


def test_method_ordering(corpus_run):
    table1 = pd.read_csv(corpus_run["run"] / "table1.csv").set_index("method")
    proposed = "Case 3 (MultiUser)"
    assert table1.loc["Average", "nMAE"] > table1.loc["ICA", "nMAE"] > table1.loc[proposed, "nMAE"]
    assert table1.loc[proposed, "std_nMAE"] < table1.loc["ICA", "std_nMAE"]


def test_fine_tuning_beats_ica_on_most_days(corpus_run):
    errors = _day_errors(corpus_run)
    assert len(errors) >= 0.9 * HOUSEHOLDS * HOT_DAYS
    assert (errors["fine_tuned"] <= errors["ica"]).mean() >= 0.8


def test_fine_tuned_histogram_is_narrower(corpus_run):
    hist = pd.read_csv(corpus_run["run"] / "fig8_hist.csv")

    def spread(method: str) -> float:
        used = hist[(hist["method"] == method) & (hist["count"] > 0)]
        return float(used["bin_hi"].max() - used["bin_lo"].min())

    assert spread("Case 3 (MultiUser)") <= spread("ICA")
    assert hist.groupby("method")["count"].sum().eq(HOUSEHOLDS).all()


def test_nearly_every_day_is_feasible(corpus_run):
    summary = pd.read_csv(corpus_run["run"] / "summary.csv")
    primary = summary[summary["mode"] == PdfMode.MULTI_USER.value]
    assert primary["feasible"].mean() >= 0.95
    report_code = hvac_disagg.main(["report", "--config", str(corpus_run["config"]), "--out", str(corpus_run["run"])])
    assert report_code == EXIT_OK
    report = (corpus_run["run"] / "report.txt").read_text(encoding="utf-8")
    assert f"Fine-tuned days: {len(primary)}," in report


def test_feasible_results_hold_box_and_band_exactly(corpus_run):
    cfg = load_config(corpus_run["config"])
    sources = discover_customers(cfg)[:4]
    preps = [prepare_customer(s, cfg, i) for i, s in enumerate(sources)]
    pooled = estimate_base_stats(np.column_stack([p.mild.samples for p in preps]), cfg.finetune)
    results = run_mode(preps, cfg, PdfMode.MULTI_USER, pooled)
    eps = cfg.finetune.epsilon_kwh
    checked = 0
    for prep in preps:
        for day, result in results[prep.customer].items():
            total = prep.filtered.column(day)
            assert (result.hvac_hat >= 0).all() and (result.hvac_hat <= total).all()
            assert (result.base_hat >= 0).all() and (result.base_hat <= total).all()
            if result.feasible:
                deviation = np.abs(hourly_energy(result.hvac_hat) - result.hourly_hvac_bound).max()
                assert deviation <= eps + 1e-6
                checked += 1
    assert checked >= 0.95 * sum(len(p.hot_dates) for p in preps)


def test_synth_twice_gives_identical_csvs(corpus_run):
    again = corpus_run["root"] / "again"
    config = str(corpus_run["config"])
    assert hvac_disagg.main(["synth", "--config", config, "--out", str(again), "--workers", "1"]) == EXIT_OK
    first = sorted(p.name for p in corpus_run["corpus"].glob("*.csv"))
    assert first == sorted(p.name for p in again.glob("*.csv"))
    assert len(first) == 3 * HOUSEHOLDS
    for name in first:
        assert (corpus_run["corpus"] / name).read_bytes() == (again / name).read_bytes()
