from datetime import date

import numpy as np
import pandas as pd
import pytest

from day_preprocessing import DayLabel, Label
from disagg_errors import ConfigError, DataError
from disagg_evaluation import (
    EvalReport,
    EvaluationOptions,
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
from hvac_finetune import BivariateGaussian
from meter_ingestion import DailyLoadMatrix


def _days(n: int) -> tuple:
    return tuple(date(2023, 7, d) for d in range(1, n + 1))


def test_nmae_zero_for_exact_estimate():
    truth = np.random.default_rng(0).uniform(0, 3, (96, 5))
    assert nmae(truth, truth, 4.0) == 0.0


def test_nmae_constant_offset_example():
    truth = np.full(96, 1.0)
    assert nmae(truth + 0.01, truth, 4.0) == pytest.approx(24.0)
    assert nmae(truth + 0.01, truth, 4.0, normalization="per_sample") == pytest.approx(0.25)


def test_nmae_scale_consistent():
    rng = np.random.default_rng(1)
    truth = rng.uniform(0, 3, (96, 3))
    est = truth + rng.normal(0, 0.3, truth.shape)
    assert nmae(truth + 5 * (est - truth), truth, 5 * 3.5) == pytest.approx(nmae(est, truth, 3.5))


def test_nmae_needs_positive_rating():
    with pytest.raises(DataError, match="rating"):
        nmae(np.ones(96), np.ones(96), 0.0)


def test_nee_examples():
    truth = np.random.default_rng(2).uniform(0.1, 3, (96, 4))
    assert nee(truth, truth) == 0.0
    assert nee(1.1 * truth, truth) == pytest.approx(10.0)


def test_nee_zero_truth():
    with pytest.raises(DataError, match="zero"):
        nee(np.ones(96), np.zeros(96))


def test_shape_mismatch():
    with pytest.raises(DataError, match="does not match"):
        nee(np.ones((96, 2)), np.ones((96, 3)))


def test_hourly_stats_zero_for_exact_estimate():
    truth = np.random.default_rng(3).uniform(0, 3, (96, 4))
    stats = hourly_error_stats(truth, truth, 3.0)
    assert list(stats.columns) == ["hour", "min", "q1", "median", "q3", "max"]
    assert len(stats) == 24
    assert not stats.drop(columns="hour").to_numpy().any()


def test_hourly_stats_single_day_collapses_quartiles():
    rng = np.random.default_rng(4)
    truth = rng.uniform(0, 3, 96)
    stats = hourly_error_stats(truth + rng.normal(0, 0.2, 96), truth, 3.0)
    assert np.allclose(stats["q1"], stats["median"])
    assert np.allclose(stats["median"], stats["q3"])


def test_hourly_stats_find_evening_error():
    rng = np.random.default_rng(5)
    truth = rng.uniform(0, 3, (96, 10))
    est = truth + rng.normal(0, 0.05, truth.shape)
    est[72:76] += 1.0
    stats = hourly_error_stats(est, truth, 3.0)
    assert int(stats["median"].idxmax()) == 18
    assert (stats["min"] <= stats["q1"]).all() and (stats["q3"] <= stats["max"]).all()


def test_benchmark_average_mild():
    rng = np.random.default_rng(6)
    mild = DailyLoadMatrix(rng.uniform(0.3, 1.5, (96, 4)), _days(4))
    avg = mild.samples.mean(axis=1)
    hot = DailyLoadMatrix(np.column_stack([avg, avg + 2.0]), (date(2023, 8, 1), date(2023, 8, 2)))
    est = benchmark_average_mild(hot, mild)
    assert not est[:, 0].any()
    assert np.allclose(est[:, 1], 2.0)


def test_benchmark_stays_within_hot_load():
    rng = np.random.default_rng(7)
    mild = DailyLoadMatrix(rng.uniform(0.3, 2.0, (96, 5)), _days(5))
    hot = DailyLoadMatrix(rng.uniform(0.0, 4.0, (96, 3)), (date(2023, 8, 1), date(2023, 8, 2), date(2023, 8, 3)))
    est = benchmark_average_mild(hot, mild)
    assert (est >= 0).all() and (est <= hot.samples).all()


def test_histogram_single_bin():
    hist = nmae_histogram([0.10] * 7)
    assert len(hist) == 11
    row = hist[hist["count"] > 0]
    assert row[["bin_lo", "bin_hi", "count"]].values.tolist() == [[0.10, 0.15, 7]]


def test_histogram_overflow_bin():
    hist = nmae_histogram([0.02, 0.07, 0.7])
    assert hist["count"].sum() == 3
    assert hist.iloc[-1]["bin_lo"] == 0.5 and hist.iloc[-1]["bin_hi"] == np.inf
    assert hist.iloc[-1]["count"] == 1


def test_histogram_empty_after_filtering():
    with pytest.raises(DataError):
        nmae_histogram([np.nan])


def test_rating_from_truth_or_nameplate():
    truth = np.concatenate([np.zeros(50), np.full(50, 3.5)])
    assert rating_kw(truth) == pytest.approx(3.5)
    assert rating_kw(np.zeros(96), EvaluationOptions(nameplate_kw=4.0)) == 4.0
    with pytest.raises(DataError, match="nameplate"):
        rating_kw(np.zeros(96))


def test_label_agreement():
    labels = [
        DayLabel(date(2023, 7, 1), Label.HOT, ("temperature-hot",)),
        DayLabel(date(2023, 7, 2), Label.MILD, ("temperature-mild",)),
        DayLabel(date(2023, 7, 3), Label.MILD, ("temperature-mild",)),
        DayLabel(date(2023, 7, 4), Label.EXCLUDED, ("temperature-band",)),
        DayLabel(date(2023, 7, 5), Label.HOT, ("temperature-hot",)),
    ]
    truth = {date(2023, 7, 1): 20.0, date(2023, 7, 2): 0.0, date(2023, 7, 3): 0.3, date(2023, 7, 4): 0.2}
    frame = label_agreement(labels, truth)
    assert frame["intent"].tolist() == ["Hot", "Mild", "Light", "Light"]
    assert frame["agrees"].tolist() == [True, True, False, True]


def test_table_frames():
    reports = [
        EvalReport("Average", {"H01": 10.0, "H02": 20.0}, {"H01": 5.0, "H02": 7.0}, {"H01": 3.0, "H02": 3.0}),
        EvalReport("ICA", {"H01": 8.0}, {"H01": 4.0}, {"H01": 3.0}),
    ]
    t1 = table1_frame(reports)
    assert list(t1.columns) == ["method", "nMAE", "nEE", "std_nMAE"]
    assert t1.iloc[0].tolist() == ["Average", 15.0, 6.0, pytest.approx(np.sqrt(50.0))]
    assert t1.iloc[1]["std_nMAE"] == 0.0

    t2 = table2_frame({"Actual": BivariateGaussian([15.4, 3.16], [[79.99, 13.12], [13.12, 8.02]])})
    assert list(t2.columns) == ["method", "mu_diurnal", "mu_nocturnal", "sigma_dd", "sigma_dn", "sigma_nn"]
    assert t2.iloc[0]["sigma_dn"] == 13.12


def test_write_csv(tmp_path):
    path = tmp_path / "out" / "table.csv"
    write_csv(pd.DataFrame({"method": ["ICA"], "nMAE": [1.0 / 3.0]}), path)
    assert path.read_text() == "method,nMAE\nICA,0.333333\n"


def test_svg_plots_are_reproducible(tmp_path):
    rng = np.random.default_rng(8)
    truth = rng.uniform(0, 3, (96, 6))
    stats = hourly_error_stats(truth + rng.normal(0, 0.2, truth.shape), truth, 3.0)
    first, second = tmp_path / "a.svg", tmp_path / "b.svg"
    plot_hourly_boxplot(stats, first, title="H01")
    plot_hourly_boxplot(stats, second, title="H01")
    assert first.read_text().lstrip().startswith("<?xml")
    assert first.read_bytes() == second.read_bytes()

    hist = pd.concat(
        [nmae_histogram([0.1, 0.12, 0.3]).assign(method="ICA"), nmae_histogram([0.08, 0.11]).assign(method="Case 3")]
    )
    plot_nmae_histogram(hist, tmp_path / "hist.svg")
    assert (tmp_path / "hist.svg").stat().st_size > 0


def test_evaluation_options_validation():
    with pytest.raises(ConfigError):
        EvaluationOptions(nmae_normalization="per_hour")
    with pytest.raises(ConfigError):
        EvaluationOptions(nameplate_kw=-1.0)
