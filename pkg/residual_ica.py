#!/usr/bin/env python3
"""
Two-component FastICA on residual load profiles.

The residual ensemble of one hot day (N time samples x K mild-day
subtractions) is modelled as [HVAC, noise] (N x 2) times a 2 x K mixing
matrix. We whiten onto the top two principal directions, run symmetric
fixed-point FastICA with the log-cosh contrast, and then decide which of
the two sources is the HVAC load by its link to outdoor temperature.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from day_preprocessing import ResidualEnsemble
from disagg_errors import ConfigError, DataError

log = logging.getLogger(__name__)

N_COMPONENTS = 2
RANK_TOL = 1e-10
WEAK_LINK = 0.1


@dataclass(frozen=True)
class IcaOptions:
    tol: float = 1e-6
    max_iters: int = 500
    seed: int = 0
    dump_sources: bool = False

    def __post_init__(self) -> None:
        if self.tol <= 0 or self.max_iters < 0:
            raise ConfigError("ica: tol must be > 0 and max_iters >= 0")


@dataclass(frozen=True, eq=False)
class WhiteningModel:
    mean_vector: np.ndarray  # K
    whitening_matrix: np.ndarray  # 2 x K
    dewhitening_matrix: np.ndarray  # K x 2


@dataclass(frozen=True, eq=False)
class IcaModel:
    unmixing_W: np.ndarray  # K x 2, sources = residuals @ W
    mixing_A_hat: np.ndarray  # 2 x K
    sources: np.ndarray  # N x 2
    rotation: np.ndarray  # 2 x 2, orthonormal rows
    convergence_iters: int
    converged: bool
    hvac_component_index: Optional[int] = None

    @property
    def centered_sources(self) -> np.ndarray:
        return self.sources - self.sources.mean(axis=0)


@dataclass(frozen=True, eq=False)
class HvacIcaEstimate:
    profile: np.ndarray  # N, kW, >= 0
    component_index: int
    correlation: float
    scale: float
    weak_linkage: bool


def center_and_whiten(residuals: np.ndarray) -> tuple[np.ndarray, WhiteningModel]:
    """Remove column means and project onto the top two principal
    components, scaled to unit sample variance."""
    X = np.asarray(residuals, dtype=float)
    if X.ndim != 2 or X.shape[1] < 3:
        raise DataError(f"residual ensemble must be N x K with K >= 3, got {X.shape}")
    n = X.shape[0]
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1][:N_COMPONENTS]
    d, E = vals[order], vecs[:, order]
    if d[0] <= 0 or d[1] <= RANK_TOL * d[0]:
        raise DataError("insufficient ensemble rank")
    # eigenvector signs are arbitrary; pin them so reruns agree
    flip = np.sign(E[np.argmax(np.abs(E), axis=0), np.arange(N_COMPONENTS)])
    E = E * flip
    whitening = (E / np.sqrt(d)).T
    dewhitening = E * np.sqrt(d)
    return Xc @ whitening.T, WhiteningModel(mean, whitening, dewhitening)


def _sym_decorrelate(W: np.ndarray) -> np.ndarray:
    s, u = np.linalg.eigh(W @ W.T)
    return (u * (1.0 / np.sqrt(s))) @ u.T @ W


def fastica_2comp(whitened: np.ndarray, whitening: WhiteningModel, opts: IcaOptions = IcaOptions()) -> IcaModel:
    """Symmetric fixed-point FastICA, log-cosh contrast (a = 1).

    Non-convergence is flagged on the model, not raised.
    """
    Z = np.asarray(whitened, dtype=float)
    n = Z.shape[0]
    rng = np.random.default_rng(opts.seed)
    R = _sym_decorrelate(rng.standard_normal((N_COMPONENTS, N_COMPONENTS)))
    converged = False
    iters = 0
    for it in range(opts.max_iters):
        g = np.tanh(Z @ R.T)
        g_prime = 1.0 - g**2
        R_new = _sym_decorrelate((g.T @ Z) / n - g_prime.mean(axis=0)[:, None] * R)
        lim = np.max(np.abs(np.abs(np.sum(R_new * R, axis=1)) - 1.0))
        R = R_new
        iters = it + 1
        if lim < opts.tol:
            converged = True
            break
    if not converged and opts.max_iters > 0:
        log.warning("FastICA did not converge in %d iterations", iters)

    W = whitening.whitening_matrix.T @ R.T
    A = R @ whitening.dewhitening_matrix.T
    sources = Z @ R.T + whitening.mean_vector @ W
    return IcaModel(W, A, sources, R, iters, converged)


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    denom = np.sqrt(np.dot(xc, xc) * np.dot(yc, yc))
    if denom == 0 or not np.isfinite(denom):
        return 0.0
    return float(np.dot(xc, yc) / denom)


def select_hvac(model: IcaModel, hot_temps: np.ndarray, residual_mean: np.ndarray) -> HvacIcaEstimate:
    """Pick the source that tracks temperature, fix its sign and restore its
    amplitude against the mean residual."""
    S = model.sources
    n = S.shape[0]
    if S.shape[1] != N_COMPONENTS or n % 24:
        raise DataError(f"expected N x 2 sources with N a multiple of 24, got {S.shape}")
    temps = np.asarray(hot_temps, dtype=float)
    hourly = S.reshape(24, n // 24, N_COMPONENTS).sum(axis=1)
    corrs = [_pearson(hourly[:, c], temps) for c in range(N_COMPONENTS)]
    idx = int(np.argmax(np.abs(corrs)))
    weak = max(abs(c) for c in corrs) < WEAK_LINK
    if weak:
        log.warning("weak temperature linkage (|r| = %.3f, %.3f)", abs(corrs[0]), abs(corrs[1]))

    sign = 1.0 if corrs[idx] >= 0 else -1.0
    chosen = sign * S[:, idx]
    energy = float(np.dot(chosen, chosen))
    scale = max(0.0, float(np.dot(chosen, residual_mean)) / energy) if energy > 0 else 0.0
    profile = np.clip(scale * chosen, 0.0, None)
    return HvacIcaEstimate(profile, idx, abs(corrs[idx]), scale, weak)


def run_ica(
    ensemble: ResidualEnsemble, hot_temps: np.ndarray, opts: IcaOptions = IcaOptions()
) -> tuple[IcaModel, HvacIcaEstimate]:
    whitened, whitening = center_and_whiten(ensemble.residuals)
    model = fastica_2comp(whitened, whitening, opts)
    estimate = select_hvac(model, hot_temps, ensemble.residuals.mean(axis=1))
    return replace(model, hvac_component_index=estimate.component_index), estimate


def dump_sources_csv(path: Path, model: IcaModel) -> None:
    frame = pd.DataFrame(
        {
            "slot": np.arange(model.sources.shape[0]),
            "source_0": model.sources[:, 0],
            "source_1": model.sources[:, 1],
        }
    )
    frame["hvac_component"] = model.hvac_component_index if model.hvac_component_index is not None else -1
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
