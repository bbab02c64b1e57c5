from dataclasses import fields, replace
from datetime import date

import numpy as np
import pytest

from day_preprocessing import ResidualEnsemble
from disagg_errors import DataError
from residual_ica import IcaOptions, center_and_whiten, dump_sources_csv, fastica_2comp, run_ica, select_hvac

HOURS = np.arange(24)
TEMPS = 27.0 - 7.0 * np.cos(2 * np.pi * (HOURS - 4) / 24)


def _square_wave() -> np.ndarray:
    slots = np.arange(96)
    on = (slots >= 40) & (slots <= 84) & ((slots - 40) % 6 < 3)
    return np.where(on, 3.0, 0.0)


def _ensemble(seed: int, k: int = 10) -> tuple[ResidualEnsemble, np.ndarray]:
    rng = np.random.default_rng(seed)
    hvac = _square_wave()
    noise = rng.laplace(0.0, 0.5, 96)
    mixing = np.vstack([rng.uniform(0.8, 1.2, k), rng.normal(0.0, 0.5, k)])
    residuals = np.column_stack([hvac, noise]) @ mixing
    ens = ResidualEnsemble(residuals, date(2023, 7, 20), tuple(date(2023, 7, d) for d in range(1, k + 1)), np.zeros((96, k)))
    return ens, hvac


def test_whitened_covariance_is_identity():
    rng = np.random.default_rng(0)
    for _ in range(50):
        X = rng.normal(size=(96, 10))
        Z, _ = center_and_whiten(X)
        cov = Z.T @ Z / (Z.shape[0] - 1)
        assert np.linalg.norm(cov - np.eye(2)) <= 1e-8


def test_whitening_rejects_rank_one_ensemble():
    col = np.random.default_rng(1).normal(size=96)
    X = np.column_stack([col + k for k in range(6)])
    with pytest.raises(DataError, match="insufficient ensemble rank"):
        center_and_whiten(X)


def test_whitening_needs_three_columns():
    with pytest.raises(DataError):
        center_and_whiten(np.ones((96, 2)))


def test_dewhitening_inverts_whitening():
    ens, _ = _ensemble(4)
    Z, whitening = center_and_whiten(ens.residuals)
    assert [f.name for f in fields(whitening)] == ["mean_vector", "whitening_matrix", "dewhitening_matrix"]
    assert np.allclose(whitening.whitening_matrix @ whitening.dewhitening_matrix, np.eye(2), atol=1e-10)
    projected = Z @ whitening.dewhitening_matrix.T + whitening.mean_vector
    assert np.allclose(projected, ens.residuals, atol=1e-8)


def test_rotation_is_orthonormal_and_reconstructs():
    ens, _ = _ensemble(3)
    Z, whitening = center_and_whiten(ens.residuals)
    model = fastica_2comp(Z, whitening)
    assert np.linalg.norm(model.rotation @ model.rotation.T - np.eye(2)) <= 1e-8
    rebuilt = model.centered_sources @ model.mixing_A_hat + whitening.mean_vector
    assert np.allclose(rebuilt, ens.residuals, atol=1e-8)
    assert np.allclose(ens.residuals @ model.unmixing_W, model.sources, atol=1e-8)


def test_zero_iterations_returns_unconverged_model(caplog):
    ens, _ = _ensemble(4)
    Z, whitening = center_and_whiten(ens.residuals)
    model = fastica_2comp(Z, whitening, IcaOptions(max_iters=0))
    assert not model.converged
    assert model.convergence_iters == 0
    assert "did not converge" not in caplog.text


def test_iteration_cap_is_flagged(caplog):
    ens, _ = _ensemble(4)
    Z, whitening = center_and_whiten(ens.residuals)
    model = fastica_2comp(Z, whitening, IcaOptions(max_iters=1, tol=1e-15))
    assert not model.converged
    assert "did not converge" in caplog.text


def test_hvac_recovery_rate():
    hits = 0
    for seed in range(100):
        ens, hvac = _ensemble(seed)
        _, estimate = run_ica(ens, TEMPS, IcaOptions(seed=seed))
        if abs(np.corrcoef(estimate.profile, hvac)[0, 1]) >= 0.95:
            hits += 1
    assert hits >= 95


def test_estimate_is_nonnegative_and_scaled():
    ens, hvac = _ensemble(7)
    model, estimate = run_ica(ens, TEMPS)
    assert (estimate.profile >= 0).all()
    assert estimate.scale >= 0
    assert model.hvac_component_index == estimate.component_index
    assert not estimate.weak_linkage
    assert abs(estimate.profile.sum() - hvac.sum()) <= 0.25 * hvac.sum()


def test_selection_ignores_source_sign_and_order():
    ens, _ = _ensemble(9)
    model, estimate = run_ica(ens, TEMPS)
    residual_mean = ens.residuals.mean(axis=1)
    flipped = replace(model, sources=model.sources * np.array([-1.0, 1.0]))
    swapped = replace(model, sources=model.sources[:, ::-1].copy())
    for variant in (flipped, swapped):
        other = select_hvac(variant, TEMPS, residual_mean)
        assert np.array_equal(other.profile, estimate.profile)
        assert other.correlation == estimate.correlation


def test_same_seed_same_sources():
    ens, _ = _ensemble(12)
    first, _ = run_ica(ens, TEMPS, IcaOptions(seed=5))
    second, _ = run_ica(ens, TEMPS, IcaOptions(seed=5))
    assert np.array_equal(first.sources, second.sources)


def test_flat_temperature_warns_weak_linkage(caplog):
    ens, _ = _ensemble(13)
    _, estimate = run_ica(ens, np.full(24, 30.0))
    assert estimate.weak_linkage
    assert "weak temperature linkage" in caplog.text


def test_select_hvac_rejects_odd_length():
    ens, _ = _ensemble(14)
    model, _ = run_ica(ens, TEMPS)
    short = replace(model, sources=model.sources[:95])
    with pytest.raises(DataError):
        select_hvac(short, TEMPS, np.zeros(95))


def test_dump_sources_csv(tmp_path):
    ens, _ = _ensemble(15)
    model, _ = run_ica(ens, TEMPS)
    path = tmp_path / "ica" / "2023-07-20.csv"
    dump_sources_csv(path, model)
    lines = path.read_text().splitlines()
    assert lines[0] == "slot,source_0,source_1,hvac_component"
    assert len(lines) == 97
