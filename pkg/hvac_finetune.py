#!/usr/bin/env python3
"""
Constrained fine-tuning of the ICA HVAC estimate.

For one hot day the total load p is split as

    hvac = alpha * p_ica + theta_h
    base = P_mild @ beta + theta_b

minimising the shape loss ||p - hvac - base||^2 plus ridge terms on the
thetas and (optionally) a KL term pulling the day's diurnal/nocturnal base
energy towards the mild-day distribution. Hourly HVAC energy must stay
within epsilon of the temperature model gamma1*T + gamma2*T^2 (quadratic
penalty, then an exact per-hour settling step), and both profiles are
clamped to [0, p] by projection. gamma is either held at the customer-wide
fit or optimised per day.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from disagg_errors import ConfigError, DataError, SolverDivergence

log = logging.getLogger(__name__)

SPD_MIN_EIG = 1e-9
COV_RIDGE = 1e-6
FEAS_TOL = 1e-6
TINY = 1e-12
PRECOND_RIDGE = 1e-6
ACTIVE_TOL = 1e-10
# hours whose band deviation exceeds this share of epsilon get band curvature
BAND_NEAR = 0.9
BAND_INSET = 1e-9
SETTLE_BISECTIONS = 100


class PdfMode(str, Enum):
    OFF = "Off"
    SINGLE_USER = "SingleUser"
    MULTI_USER = "MultiUser"


class KlSign(str, Enum):
    PENALIZE = "Penalize"
    # subtract lambda3 * KL, as the objective is sometimes written
    REWARD = "Reward"

    @classmethod
    def _missing_(cls, value):
        if value == "PaperLiteral":
            return cls.REWARD
        return None


CASE_NAMES = {PdfMode.OFF: "Case 1", PdfMode.SINGLE_USER: "Case 2", PdfMode.MULTI_USER: "Case 3"}


@dataclass(frozen=True)
class SolverOptions:
    max_iters: int = 2000
    step: float = 1e-3
    max_step: float = 1.0
    tol: float = 1e-7
    max_backtracks: int = 40
    penalty_init: float = 10.0
    penalty_every: int = 50
    penalty_max: float = 1e8

    def __post_init__(self) -> None:
        if self.max_iters < 1 or self.step <= 0 or self.max_step < self.step or self.tol <= 0:
            raise ConfigError("finetune.solver: need max_iters >= 1, 0 < step <= max_step, tol > 0")
        if self.penalty_init <= 0 or self.penalty_max < self.penalty_init or self.penalty_every < 1:
            raise ConfigError("finetune.solver: need 0 < penalty_init <= penalty_max, penalty_every >= 1")


@dataclass(frozen=True)
class FineTuneConfig:
    lambda1: float = 0.1
    lambda2: float = 0.1
    lambda3: float = 1.0
    epsilon_kwh: float = 0.25
    pdf_mode: PdfMode = PdfMode.MULTI_USER
    diurnal_window: tuple = (36, 68)  # [start, stop) slots, 09:00-17:00
    nocturnal_window: tuple = (0, 20)  # 00:00-05:00
    kl_sign: KlSign = KlSign.PENALIZE
    solver: SolverOptions = field(default_factory=SolverOptions)
    outer_passes: int = 2
    shared_gamma: bool = True  # hold gamma at the customer-wide fit
    cases: tuple = ()
    dump_traces: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "pdf_mode", PdfMode(self.pdf_mode))
        object.__setattr__(self, "kl_sign", KlSign(self.kl_sign))
        object.__setattr__(self, "cases", tuple(PdfMode(c) for c in self.cases))
        object.__setattr__(self, "diurnal_window", tuple(int(x) for x in self.diurnal_window))
        object.__setattr__(self, "nocturnal_window", tuple(int(x) for x in self.nocturnal_window))
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("finetune: lambda weights must be >= 0")
        if self.epsilon_kwh <= 0:
            raise ConfigError("finetune: epsilon_kwh must be > 0")
        if self.outer_passes < 1:
            raise ConfigError("finetune: outer_passes must be >= 1")
        (d0, d1), (n0, n1) = self.diurnal_window, self.nocturnal_window
        if not (0 <= d0 < d1 and 0 <= n0 < n1):
            raise ConfigError("finetune: windows must be nonempty [start, stop) slot ranges")
        if d0 < n1 and n0 < d1:
            raise ConfigError("finetune: diurnal and nocturnal windows overlap")

    @property
    def all_modes(self) -> tuple:
        """Configured pdf_mode first, then any extra cases."""
        return (self.pdf_mode,) + tuple(m for m in dict.fromkeys(self.cases) if m is not self.pdf_mode)


@dataclass(frozen=True, eq=False)
class BivariateGaussian:
    """Distribution of (diurnal, nocturnal) daily base energy in kWh."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self) -> None:
        mu = np.asarray(self.mu, dtype=float).reshape(-1)
        sigma = np.asarray(self.sigma, dtype=float)
        if mu.shape != (2,) or sigma.shape != (2, 2):
            raise DataError("bivariate Gaussian needs a 2-vector mean and 2x2 covariance")
        if not (np.isfinite(mu).all() and np.isfinite(sigma).all()):
            raise DataError("non-finite Gaussian parameters")
        if abs(sigma[0, 1] - sigma[1, 0]) > 1e-9 * max(1.0, np.abs(sigma).max()):
            raise DataError("covariance is not symmetric")
        if np.linalg.eigvalsh(sigma).min() <= SPD_MIN_EIG:
            raise DataError("covariance is not positive definite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


@dataclass(frozen=True, eq=False)
class FineTuneVars:
    alpha: float
    beta: np.ndarray
    theta_h: np.ndarray
    theta_b: np.ndarray
    gamma1: float
    gamma2: float

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.alpha], self.beta, self.theta_h, self.theta_b, [self.gamma1, self.gamma2]])

    @classmethod
    def from_vector(cls, vec: np.ndarray, k: int, n: int) -> "FineTuneVars":
        return cls(
            alpha=float(vec[0]),
            beta=vec[1 : 1 + k].copy(),
            theta_h=vec[1 + k : 1 + k + n].copy(),
            theta_b=vec[1 + k + n : 1 + k + 2 * n].copy(),
            gamma1=float(vec[-2]),
            gamma2=float(vec[-1]),
        )


@dataclass(frozen=True, eq=False)
class FineTuneProblem:
    """Data for one hot day."""

    total: np.ndarray  # N kW
    ica_hvac: np.ndarray  # N kW
    mild_matrix: np.ndarray  # N x K kW
    temps: np.ndarray  # 24 degC
    cfg: FineTuneConfig
    mild_stats: Optional[BivariateGaussian] = None
    candidate_sigma: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        total = np.asarray(self.total, dtype=float)
        n = total.shape[0]
        mild = np.asarray(self.mild_matrix, dtype=float)
        if n % 24 or np.asarray(self.ica_hvac).shape != (n,) or mild.ndim != 2 or mild.shape[0] != n:
            raise DataError("total, ica_hvac and mild_matrix must share N rows with N a multiple of 24")
        if np.asarray(self.temps).shape != (24,):
            raise DataError("temps must hold 24 hourly values")
        if max(self.cfg.diurnal_window[1], self.cfg.nocturnal_window[1]) > n:
            raise DataError(f"energy windows exceed the {n}-slot day")
        if self.kl_sign_factor and self.mild_stats is None:
            raise DataError(f"pdf_mode {self.cfg.pdf_mode.value} needs base-load statistics")

    @property
    def n(self) -> int:
        return len(self.total)

    @property
    def slot_hours(self) -> float:
        return 24.0 / self.n

    @property
    def kl_sign_factor(self) -> float:
        if self.cfg.pdf_mode is PdfMode.OFF or self.cfg.lambda3 == 0:
            return 0.0
        return 1.0 if self.cfg.kl_sign is KlSign.PENALIZE else -1.0

    @property
    def sigma_p(self) -> np.ndarray:
        return self.mild_stats.sigma if self.candidate_sigma is None else np.asarray(self.candidate_sigma)


@dataclass(frozen=True, eq=False)
class DisaggregationResult:
    hvac_hat: np.ndarray
    base_hat: np.ndarray
    ica_hvac: np.ndarray
    hourly_hvac_bound: np.ndarray
    objective_trace: np.ndarray
    penalty_trace: np.ndarray
    feasible: bool
    max_hourly_deviation: float
    iterations: int
    converged: bool
    final_vars: FineTuneVars
    settled_hours: int = 0

    @property
    def alpha(self) -> float:
        return self.final_vars.alpha

    @property
    def gamma(self) -> tuple[float, float]:
        return self.final_vars.gamma1, self.final_vars.gamma2


def _window_mask(n: int, window: tuple) -> np.ndarray:
    mask = np.zeros(n)
    mask[window[0] : window[1]] = 1.0
    return mask


def diurnal_nocturnal_energy(profile: np.ndarray, cfg: FineTuneConfig = FineTuneConfig()) -> tuple[float, float]:
    """kWh over the diurnal and nocturnal windows of a kW profile."""
    p = np.asarray(profile, dtype=float)
    n = p.shape[0]
    if max(cfg.diurnal_window[1], cfg.nocturnal_window[1]) > n:
        raise DataError(f"energy windows exceed the {n}-slot day")
    slot_hours = 24.0 / n
    (d0, d1), (n0, n1) = cfg.diurnal_window, cfg.nocturnal_window
    return slot_hours * float(p[d0:d1].sum()), slot_hours * float(p[n0:n1].sum())


def kl_bivariate_gaussian(p: BivariateGaussian, q: BivariateGaussian) -> float:
    """D_KL(p || q) in closed form."""
    if np.array_equal(p.mu, q.mu) and np.array_equal(p.sigma, q.sigma):
        return 0.0
    delta = q.mu - p.mu
    trace_term = np.trace(np.linalg.solve(q.sigma, p.sigma))
    mahal = float(delta @ np.linalg.solve(q.sigma, delta))
    _, logdet_q = np.linalg.slogdet(q.sigma)
    _, logdet_p = np.linalg.slogdet(p.sigma)
    return max(0.0, 0.5 * (trace_term + mahal - 2.0 + logdet_q - logdet_p))


def estimate_base_stats(base_profiles: np.ndarray, cfg: FineTuneConfig = FineTuneConfig()) -> BivariateGaussian:
    profiles = np.asarray(base_profiles, dtype=float)
    if profiles.ndim != 2 or profiles.shape[1] < 3:
        raise DataError(f"base statistics need >= 3 day profiles, got {profiles.shape[-1] if profiles.ndim else 0}")
    energies = np.array([diurnal_nocturnal_energy(profiles[:, j], cfg) for j in range(profiles.shape[1])])
    mu = energies.mean(axis=0)
    sigma = np.cov(energies, rowvar=False, ddof=1)
    sigma = 0.5 * (sigma + sigma.T)
    if np.linalg.eigvalsh(sigma).min() < SPD_MIN_EIG:
        sigma = sigma + COV_RIDGE * np.eye(2)
    return BivariateGaussian(mu, sigma)


def hourly_bound_model(temps: np.ndarray, gamma1: float, gamma2: float) -> np.ndarray:
    T = np.asarray(temps, dtype=float)
    return np.clip(gamma1 * T + gamma2 * T * T, 0.0, None)


def fit_hourly_bound(hourly_energy: np.ndarray, temps: np.ndarray) -> tuple[float, float]:
    """Least-squares (gamma1, gamma2) for energy ~ gamma1*T + gamma2*T^2, no intercept."""
    e = np.asarray(hourly_energy, dtype=float).ravel()
    T = np.asarray(temps, dtype=float).ravel()
    if e.shape != T.shape or e.size < 2:
        raise DataError("hourly energy and temperature must align with >= 2 points")
    design = np.column_stack([T, T * T])
    coef, *_ = np.linalg.lstsq(design, e, rcond=None)
    return float(coef[0]), float(coef[1])


def hourly_energy(profile: np.ndarray) -> np.ndarray:
    p = np.asarray(profile, dtype=float)
    per_hour = p.shape[0] // 24
    return p.reshape(24, per_hour).sum(axis=1) / per_hour


def _terms(
    hvac: np.ndarray,
    base: np.ndarray,
    theta_h: np.ndarray,
    theta_b: np.ndarray,
    gamma1: float,
    gamma2: float,
    problem: FineTuneProblem,
    rho: float,
) -> tuple[float, np.ndarray, np.ndarray, np.ndarray]:
    """Objective value and its gradient with respect to the two profiles and gamma."""
    cfg = problem.cfg
    T = problem.temps
    r = problem.total - hvac - base

    value = float(r @ r + cfg.lambda1 * (theta_h @ theta_h) + cfg.lambda2 * (theta_b @ theta_b))
    g_hvac = -2.0 * r + 2.0 * cfg.lambda1 * theta_h
    g_base = -2.0 * r + 2.0 * cfg.lambda2 * theta_b

    sign = problem.kl_sign_factor
    if sign:
        q = problem.mild_stats
        mu_p = np.array(diurnal_nocturnal_energy(base, cfg))
        coef = sign * cfg.lambda3
        value += coef * kl_bivariate_gaussian(BivariateGaussian(mu_p, problem.sigma_p), q)
        g_mu = np.linalg.solve(q.sigma, mu_p - q.mu)
        n = problem.n
        g_base = g_base + coef * problem.slot_hours * (
            g_mu[0] * _window_mask(n, cfg.diurnal_window) + g_mu[1] * _window_mask(n, cfg.nocturnal_window)
        )

    raw = gamma1 * T + gamma2 * T * T
    dev = hourly_energy(hvac) - np.clip(raw, 0.0, None)
    viol = np.maximum(0.0, np.abs(dev) - cfg.epsilon_kwh)
    value += float(rho * (viol @ viol))
    g_dev = 2.0 * rho * viol * np.sign(dev)
    per_hour = problem.n // 24
    g_hvac = g_hvac + np.repeat(g_dev, per_hour) / per_hour
    active = raw > 0
    g_gamma = -np.array([np.sum(g_dev * T * active), np.sum(g_dev * T * T * active)])
    return value, g_hvac, g_base, g_gamma


def objective_and_gradient(v: FineTuneVars, problem: FineTuneProblem, rho: float) -> tuple[float, FineTuneVars]:
    """Penalised objective and its gradient with respect to every variable."""
    x, M = problem.ica_hvac, problem.mild_matrix
    hvac = v.alpha * x + v.theta_h
    base = M @ v.beta + v.theta_b
    value, g_hvac, g_base, g_gamma = _terms(hvac, base, v.theta_h, v.theta_b, v.gamma1, v.gamma2, problem, rho)
    cfg = problem.cfg
    grad = FineTuneVars(
        alpha=float(x @ (g_hvac - 2.0 * cfg.lambda1 * v.theta_h)),
        beta=M.T @ (g_base - 2.0 * cfg.lambda2 * v.theta_b),
        theta_h=g_hvac,
        theta_b=g_base,
        gamma1=float(g_gamma[0]),
        gamma2=float(g_gamma[1]),
    )
    return value, grad


# The solver works on z = [alpha, beta, hvac, base, gamma1, gamma2]: the box
# constraints are then plain bounds on z and projection is a clip.


@dataclass(frozen=True)
class _Layout:
    k: int
    n: int

    @property
    def alpha(self) -> slice:
        return slice(0, 1)

    @property
    def beta(self) -> slice:
        return slice(1, 1 + self.k)

    @property
    def hvac(self) -> slice:
        return slice(1 + self.k, 1 + self.k + self.n)

    @property
    def base(self) -> slice:
        return slice(1 + self.k + self.n, 1 + self.k + 2 * self.n)

    @property
    def gamma(self) -> slice:
        return slice(1 + self.k + 2 * self.n, 3 + self.k + 2 * self.n)


def _bounds(problem: FineTuneProblem, lay: _Layout) -> tuple[np.ndarray, np.ndarray]:
    size = 3 + lay.k + 2 * lay.n
    lo, hi = np.zeros(size), np.full(size, np.inf)
    hi[lay.hvac] = problem.total
    hi[lay.base] = problem.total
    lo[lay.gamma] = -np.inf
    return lo, hi


def _to_profiles(v: FineTuneVars, problem: FineTuneProblem) -> np.ndarray:
    hvac = v.alpha * problem.ica_hvac + v.theta_h
    base = problem.mild_matrix @ v.beta + v.theta_b
    return np.concatenate([[v.alpha], v.beta, hvac, base, [v.gamma1, v.gamma2]])


def _to_vars(z: np.ndarray, problem: FineTuneProblem, lay: _Layout) -> FineTuneVars:
    alpha, beta = float(z[0]), z[lay.beta].copy()
    return FineTuneVars(
        alpha=alpha,
        beta=beta,
        theta_h=z[lay.hvac] - alpha * problem.ica_hvac,
        theta_b=z[lay.base] - problem.mild_matrix @ beta,
        gamma1=float(z[lay.gamma][0]),
        gamma2=float(z[lay.gamma][1]),
    )


def _profile_objective(z: np.ndarray, problem: FineTuneProblem, lay: _Layout, rho: float) -> tuple[float, np.ndarray]:
    cfg = problem.cfg
    x, M = problem.ica_hvac, problem.mild_matrix
    alpha, beta, hvac, base = z[0], z[lay.beta], z[lay.hvac], z[lay.base]
    gamma1, gamma2 = z[lay.gamma]
    theta_h = hvac - alpha * x
    theta_b = base - M @ beta
    value, g_hvac, g_base, g_gamma = _terms(hvac, base, theta_h, theta_b, gamma1, gamma2, problem, rho)
    grad = np.concatenate(
        [[-2.0 * cfg.lambda1 * float(x @ theta_h)], -2.0 * cfg.lambda2 * (M.T @ theta_b), g_hvac, g_base, g_gamma]
    )
    return value, grad


def _band_deviation(z: np.ndarray, problem: FineTuneProblem, lay: _Layout) -> np.ndarray:
    gamma1, gamma2 = z[lay.gamma]
    return hourly_energy(z[lay.hvac]) - hourly_bound_model(problem.temps, gamma1, gamma2)


def _solve_masked(hess: np.ndarray, grad: np.ndarray, free: np.ndarray) -> np.ndarray:
    out = np.zeros_like(grad)
    if free.any():
        sub = hess[np.ix_(free, free)]
        ridge = PRECOND_RIDGE * max(1.0, np.trace(sub) / len(sub))
        out[free] = np.linalg.solve(sub + ridge * np.eye(len(sub)), grad[free])
    return out


def _hour_direction(
    g_hvac: np.ndarray, g_base: np.ndarray, free_h: np.ndarray, free_b: np.ndarray, active: np.ndarray,
    problem: FineTuneProblem, rho: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Solve the hourly (hvac, base) blocks, plus the low-rank KL coupling of the base windows."""
    cfg = problem.cfg
    m = problem.n // 24
    eye = np.eye(m)
    blocks = np.empty((24, 2 * m, 2 * m))
    blocks[:, :m, :m] = (2.0 + 2.0 * cfg.lambda1) * eye
    blocks[:, m:, m:] = (2.0 + 2.0 * cfg.lambda2) * eye
    blocks[:, :m, m:] = 2.0 * eye
    blocks[:, m:, :m] = 2.0 * eye
    blocks[active, :m, :m] += 2.0 * rho / m**2

    free = np.concatenate([free_h.reshape(24, m), free_b.reshape(24, m)], axis=1)
    blocks *= free[:, :, None] & free[:, None, :]
    diag = np.arange(2 * m)
    blocks[:, diag, diag] = np.where(free, blocks[:, diag, diag] + PRECOND_RIDGE, 1.0)
    inv = np.linalg.inv(blocks)

    g = np.concatenate([g_hvac.reshape(24, m), g_base.reshape(24, m)], axis=1) * free
    d = np.einsum("jab,jb->ja", inv, g)

    coef = problem.kl_sign_factor * cfg.lambda3
    if coef > 0:
        # Woodbury update for coef * A' inv(Sigma_q) A, A mapping base to window energies
        u = np.zeros((24, 2 * m, 2))
        u[:, m:, 0] = problem.slot_hours * _window_mask(problem.n, cfg.diurnal_window).reshape(24, m)
        u[:, m:, 1] = problem.slot_hours * _window_mask(problem.n, cfg.nocturnal_window).reshape(24, m)
        u *= free[:, :, None]
        hu = np.einsum("jab,jbc->jac", inv, u)
        capacitance = problem.mild_stats.sigma / coef + np.einsum("jac,jad->cd", u, hu)
        w = np.linalg.solve(capacitance, np.einsum("jac,ja->c", u, d))
        d = d - np.einsum("jac,c->ja", hu, w)
    return d[:, :m].ravel(), d[:, m:].ravel()


def _descent_direction(
    z: np.ndarray, g: np.ndarray, problem: FineTuneProblem, lay: _Layout, rho: float, lo: np.ndarray, hi: np.ndarray
) -> np.ndarray:
    """Block-Jacobi Newton direction over the variables not pinned at a bound."""
    cfg = problem.cfg
    x, M, T = problem.ica_hvac, problem.mild_matrix, problem.temps
    free = ~(((z <= lo + ACTIVE_TOL) & (g > 0)) | ((z >= hi - ACTIVE_TOL) & (g < 0)))
    d = np.zeros_like(z)

    if free[0]:
        d[0] = g[0] / max(2.0 * cfg.lambda1 * float(x @ x), TINY)
    d[lay.beta] = _solve_masked(2.0 * cfg.lambda2 * (M.T @ M), g[lay.beta], free[lay.beta])

    dev = _band_deviation(z, problem, lay)
    active = np.abs(dev) > BAND_NEAR * cfg.epsilon_kwh
    d[lay.hvac], d[lay.base] = _hour_direction(
        g[lay.hvac], g[lay.base], free[lay.hvac], free[lay.base], active, problem, rho
    )

    if not cfg.shared_gamma:
        raw = z[lay.gamma][0] * T + z[lay.gamma][1] * T * T
        basis = np.column_stack([T, T * T])[active & (raw > 0)]
        d[lay.gamma] = _solve_masked(2.0 * rho * basis.T @ basis, g[lay.gamma], np.ones(2, dtype=bool))
    return d


def _initial_vars(problem: FineTuneProblem, gamma_init: Optional[tuple]) -> FineTuneVars:
    k = problem.mild_matrix.shape[1]
    if gamma_init is None:
        gamma_init = fit_hourly_bound(hourly_energy(problem.ica_hvac), problem.temps)
    return FineTuneVars(
        alpha=1.0,
        beta=np.full(k, 1.0 / k),
        theta_h=np.zeros(problem.n),
        theta_b=np.zeros(problem.n),
        gamma1=float(gamma_init[0]),
        gamma2=float(gamma_init[1]),
    )


def _evaluate(
    z: np.ndarray, problem: FineTuneProblem, lay: _Layout, rho: float, iteration: int
) -> tuple[float, np.ndarray]:
    with np.errstate(over="ignore", invalid="ignore"):
        value, grad = _profile_objective(z, problem, lay, rho)
    if not np.isfinite(value):
        raise SolverDivergence(iteration, value)
    if problem.cfg.shared_gamma:
        grad[lay.gamma] = 0.0
    return value, grad


def settle_into_band(
    hvac: np.ndarray, base: np.ndarray, total: np.ndarray, bound: np.ndarray, epsilon: float
) -> tuple[np.ndarray, np.ndarray, int]:
    """Move each hour's HVAC energy into [bound - epsilon, bound + epsilon].

    Within an hour every slot is shifted by the same amount and clipped to
    [0, total], the smallest change that reaches the band edge. The moved
    energy comes out of (or goes into) the base load. Hours whose band lies
    above the hour's total load stay where they are.
    """
    m = len(hvac) // 24
    h, p = hvac.reshape(24, m), total.reshape(24, m)
    energy = h.mean(axis=1)
    target = np.clip(energy, bound - epsilon + BAND_INSET, bound + epsilon - BAND_INSET)
    move = (np.abs(target - energy) > 0) & (bound - epsilon <= p.mean(axis=1))
    if not move.any():
        return hvac, base, 0

    reach = float(p.max()) + 1.0
    lo, hi = np.full(24, -reach), np.full(24, reach)
    for _ in range(SETTLE_BISECTIONS):
        mid = 0.5 * (lo + hi)
        above = np.clip(h - mid[:, None], 0.0, p).mean(axis=1) > target
        lo, hi = np.where(above, mid, lo), np.where(above, hi, mid)
    shift = 0.5 * (lo + hi)
    settled = np.where(move[:, None], np.clip(h - shift[:, None], 0.0, p), h).ravel()
    rebased = np.clip(base - (settled - hvac), 0.0, total)
    return settled, rebased, int(move.sum())


def fine_tune(
    total: np.ndarray,
    ica_hvac: np.ndarray,
    mild_matrix: np.ndarray,
    temps: np.ndarray,
    mild_stats: Optional[BivariateGaussian],
    cfg: FineTuneConfig = FineTuneConfig(),
    gamma_init: Optional[tuple] = None,
    candidate_sigma: Optional[np.ndarray] = None,
    warm_start: Optional[FineTuneVars] = None,
) -> DisaggregationResult:
    """Projected, block-preconditioned gradient descent with backtracking.

    The hourly-bound penalty weight doubles every `penalty_every` iterations
    while the bound is violated, and whenever the descent stalls short of
    feasibility. `objective_trace` is non-increasing between two consecutive
    changes of `penalty_trace`. Hours still outside the band afterwards are
    settled into it (per-day gamma is refitted first when it is free); the
    result is infeasible only when a band lies above the hour's total load.
    """
    problem = FineTuneProblem(
        total=np.asarray(total, dtype=float),
        ica_hvac=np.asarray(ica_hvac, dtype=float),
        mild_matrix=np.asarray(mild_matrix, dtype=float),
        temps=np.asarray(temps, dtype=float),
        cfg=cfg,
        mild_stats=mild_stats,
        candidate_sigma=candidate_sigma,
    )
    opts = cfg.solver
    lay = _Layout(problem.mild_matrix.shape[1], problem.n)
    lo, hi = _bounds(problem, lay)
    eps = cfg.epsilon_kwh

    start = warm_start if warm_start is not None else _initial_vars(problem, gamma_init)
    rho = opts.penalty_init
    z = np.clip(_to_profiles(start, problem), lo, hi)
    f, g = _evaluate(z, problem, lay, rho, 0)
    trace, rhos = [f], [rho]
    step = opts.step
    stage_iters = 0
    converged = False
    iteration = 0

    for iteration in range(1, opts.max_iters + 1):
        direction = _descent_direction(z, g, problem, lay, rho, lo, hi)
        accepted = False
        change = 0.0
        for _ in range(opts.max_backtracks):
            cand = np.clip(z - step * direction, lo, hi)
            f_c, g_c = _evaluate(cand, problem, lay, rho, iteration)
            if f_c <= f:
                accepted = True
                break
            step *= 0.5
        if accepted:
            change = f - f_c
            z, f, g = cand, f_c, g_c
            trace.append(f)
            rhos.append(rho)
            step = min(2.0 * step, opts.max_step)

        violated = np.abs(_band_deviation(z, problem, lay)).max() > eps + FEAS_TOL
        stalled = not accepted or change <= opts.tol * max(1.0, abs(f))
        if stalled and not violated:
            converged = True
            break
        stage_iters += 1
        if violated and (stalled or stage_iters >= opts.penalty_every):
            if rho >= opts.penalty_max:
                if stalled:
                    break
                continue
            rho = min(2.0 * rho, opts.penalty_max)
            stage_iters = 0
            f, g = _evaluate(z, problem, lay, rho, iteration)
            trace.append(f)
            rhos.append(rho)

    if not cfg.shared_gamma and np.abs(_band_deviation(z, problem, lay)).max() > eps:
        refit = z.copy()
        refit[lay.gamma] = fit_hourly_bound(hourly_energy(z[lay.hvac]), problem.temps)
        if np.abs(_band_deviation(refit, problem, lay)).max() < np.abs(_band_deviation(z, problem, lay)).max():
            z = refit

    bound = hourly_bound_model(problem.temps, *z[lay.gamma])
    hvac_hat, base_hat, settled = settle_into_band(z[lay.hvac], z[lay.base], problem.total, bound, eps)
    z[lay.hvac], z[lay.base] = hvac_hat, base_hat
    hvac_hat, base_hat = z[lay.hvac].copy(), z[lay.base].copy()
    deviation = float(np.max(np.abs(hourly_energy(hvac_hat) - bound)))
    feasible = deviation <= eps + FEAS_TOL
    if settled:
        log.debug("fine-tune settled %d hour(s) into the band after %d iterations", settled, iteration)
    if not feasible:
        log.warning("fine-tune infeasible: hourly deviation %.4f kWh exceeds epsilon %.4f", deviation, eps)
    if not converged:
        log.debug("fine-tune stopped after %d iterations without converging", iteration)
    return DisaggregationResult(
        hvac_hat=hvac_hat,
        base_hat=base_hat,
        ica_hvac=problem.ica_hvac,
        hourly_hvac_bound=bound,
        objective_trace=np.array(trace),
        penalty_trace=np.array(rhos),
        feasible=feasible,
        max_hourly_deviation=deviation,
        iterations=iteration,
        converged=converged,
        final_vars=_to_vars(z, problem, lay),
        settled_hours=settled,
    )



def dump_trace_csv(path: Path, result: DisaggregationResult) -> None:
    frame = pd.DataFrame(
        {
            "step": np.arange(len(result.objective_trace)),
            "objective": result.objective_trace,
            "penalty": result.penalty_trace,
        }
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.10g", lineterminator="\n")
