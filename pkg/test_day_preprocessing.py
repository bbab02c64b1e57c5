from datetime import date, timedelta

import numpy as np
import pytest

from day_preprocessing import (
    ClassifyParams,
    Label,
    LiulParams,
    build_residual_ensemble,
    classify_days,
    filter_liul,
    filter_liul_matrix,
    jump_frequency,
    labels_to_frame,
    verify_mild_distribution,
)
from disagg_errors import ConfigError, DataError
from meter_ingestion import DailyLoadMatrix, TemperatureMatrix

START = date(2023, 7, 1)


def _dates(n: int) -> tuple:
    return tuple(START + timedelta(days=i) for i in range(n))


def _base_profile() -> np.ndarray:
    h = np.arange(96) / 4.0
    return 0.5 + 0.5 * np.exp(-(((h - 19.0) / 2.0) ** 2)) + 0.3 * np.exp(-(((h - 7.5) / 1.5) ** 2))


def _temps(maxima) -> TemperatureMatrix:
    cols = []
    for peak in maxima:
        col = np.full(24, peak - 6.0)
        col[15] = peak
        cols.append(col)
    return TemperatureMatrix(np.column_stack(cols), _dates(len(maxima)))


def test_flat_profile_unchanged():
    profile = np.ones(96)
    filtered, events = filter_liul(profile)
    assert np.array_equal(filtered, profile)
    assert events == []


def test_rectangular_block_removed():
    profile = np.full(96, 0.5)
    profile[40:44] = 4.5
    filtered, events = filter_liul(profile)
    assert np.allclose(filtered, 0.5)
    assert len(events) == 1
    assert events[0].start_index == 40 and events[0].end_index == 43
    assert events[0].magnitude == pytest.approx(4.0)


def test_small_sinusoid_unchanged():
    profile = 1.0 + 0.3 * np.sin(np.arange(96) * 2 * np.pi / 96)
    filtered, events = filter_liul(profile)
    assert np.array_equal(filtered, profile)
    assert not events


def test_long_step_is_not_a_pulse():
    profile = np.full(96, 0.5)
    profile[30:60] = 3.5
    filtered, events = filter_liul(profile, LiulParams(max_duration_slots=12))
    assert np.array_equal(filtered, profile)
    assert not events


def test_filter_never_increases_and_stays_nonnegative():
    rng = np.random.default_rng(11)
    for _ in range(50):
        profile = rng.uniform(0.0, 1.5, 96)
        for _ in range(rng.integers(0, 4)):
            start = int(rng.integers(1, 85))
            profile[start : start + int(rng.integers(2, 9))] += rng.uniform(2.0, 5.0)
        filtered, _ = filter_liul(profile)
        assert (filtered <= profile).all()
        assert (filtered >= 0).all()


def test_recurring_jump_is_kept():
    samples = np.tile(np.full(96, 0.5)[:, None], (1, 10))
    samples[40:44, :] = 4.5
    matrix = DailyLoadMatrix(samples, _dates(10))
    freq = jump_frequency(matrix.samples, LiulParams())
    assert freq[40] == 1.0
    filtered, events = filter_liul_matrix(matrix)
    assert not events
    assert np.array_equal(filtered.samples, matrix.samples)


def test_rare_jump_is_removed_across_days():
    samples = np.tile(np.full(96, 0.5)[:, None], (1, 10))
    samples[40:44, 3] = 4.5
    filtered, events = filter_liul_matrix(DailyLoadMatrix(samples, _dates(10)))
    assert len(events) == 1
    assert events[0].date == START + timedelta(days=3)
    assert np.allclose(filtered.samples, 0.5)


def test_verify_identical_and_disjoint():
    assert verify_mild_distribution(np.full(96, 1.0), np.full(300, 1.0)) == (True, 0.0)
    rng = np.random.default_rng(5)
    pool = rng.uniform(0.5, 1.5, 300)
    ok, stat = verify_mild_distribution(rng.uniform(0.5, 1.5, 96) + 3.0, pool)
    assert not ok
    assert stat == 1.0


def test_verify_same_gaussian_passes():
    rng = np.random.default_rng(6)
    passed = sum(verify_mild_distribution(rng.normal(1, 0.2, 96), rng.normal(1, 0.2, 96))[0] for _ in range(2000))
    assert passed / 2000 >= 0.99


def test_verify_empty_pool():
    with pytest.raises(DataError, match="empty"):
        verify_mild_distribution(np.ones(96), np.array([]))


def test_classify_days():
    base = _base_profile()
    loads = DailyLoadMatrix(np.column_stack([base + 2.0, base, base, base, base]), _dates(5))
    labels = classify_days(loads, _temps([35.0, 18.0, 18.5, 19.0, 25.0]))
    assert [lab.label for lab in labels] == [Label.HOT, Label.MILD, Label.MILD, Label.MILD, Label.EXCLUDED]
    assert labels[0].reasons == ("temperature-hot",)
    assert "distribution-verified" in labels[1].reasons
    assert labels[4].reasons == ("temperature-band",)


def test_classify_rejects_mismatched_mild_candidate():
    base = _base_profile()
    cols = [base] * 5 + [base + 3.0]
    labels = classify_days(DailyLoadMatrix(np.column_stack(cols), _dates(6)), _temps([18.0] * 6))
    assert [lab.label for lab in labels[:5]] == [Label.MILD] * 5
    assert labels[5].label is Label.EXCLUDED
    assert "distribution-mismatch" in labels[5].reasons
    assert labels[5].ks_stat == 1.0


def test_classify_is_deterministic_partition():
    rng = np.random.default_rng(8)
    base = _base_profile()
    cols = [base + rng.normal(0, 0.05, 96).clip(-0.4) for _ in range(8)]
    loads = DailyLoadMatrix(np.column_stack(cols), _dates(8))
    temps = _temps([33, 17, 18, 19, 20, 26, 31, 16])
    first = classify_days(loads, temps)
    assert first == classify_days(loads, temps)
    assert len(first) == 8


def test_too_few_mild_days():
    base = _base_profile()
    loads = DailyLoadMatrix(np.column_stack([base] * 4), _dates(4))
    with pytest.raises(DataError, match="widen"):
        classify_days(loads, _temps([35.0, 35.0, 18.0, 18.0]))


def test_classify_params_validation():
    with pytest.raises(ConfigError):
        ClassifyParams(mild_lo_c=22.0, mild_hi_c=20.0)


def test_ensemble_self_subtraction_is_zero():
    base = _base_profile()
    mild = DailyLoadMatrix(np.column_stack([base] * 3), _dates(3))
    ens = build_residual_ensemble(base, mild, START + timedelta(days=5), k_use=3)
    assert ens.residuals.shape == (96, 3)
    assert not ens.residuals.any()


def test_ensemble_constant_offset_and_reconstruction():
    rng = np.random.default_rng(2)
    mild = DailyLoadMatrix(rng.uniform(0.3, 1.5, (96, 5)), _dates(5))
    hot = mild.samples[:, 0] + 2.0
    ens = build_residual_ensemble(hot, mild, START + timedelta(days=9), k_use=5)
    assert np.allclose(ens.residuals[:, 0], 2.0)
    assert np.abs(ens.residuals + ens.mild_profiles - hot[:, None]).max() <= 1e-12


def test_ensemble_picks_calendar_nearest_days():
    mild = DailyLoadMatrix(np.ones((96, 20)), _dates(20))
    hot_date = START + timedelta(days=9)
    ens = build_residual_ensemble(np.ones(96), mild, hot_date, k_use=3)
    assert ens.mild_dates == (START + timedelta(days=7), START + timedelta(days=8), START + timedelta(days=10))


def test_ensemble_errors():
    mild = DailyLoadMatrix(np.ones((96, 2)), _dates(2))
    with pytest.raises(ConfigError):
        build_residual_ensemble(np.ones(96), mild, START, k_use=2)
    with pytest.raises(DataError):
        build_residual_ensemble(np.ones(96), mild, START, k_use=3)


def test_labels_to_frame():
    base = _base_profile()
    loads = DailyLoadMatrix(np.column_stack([base + 2.0, base, base, base]), _dates(4))
    frame = labels_to_frame(classify_days(loads, _temps([35.0, 18.0, 18.0, 18.0])))
    assert list(frame.columns) == ["date", "label", "reasons"]
    assert frame.iloc[0].tolist() == ["2023-07-01", "Hot", "temperature-hot"]
