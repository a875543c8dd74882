"""Linear noise schedule, forward corruption and the deterministic reverse update."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ALPHA_BAR_FLOOR = 1e-8


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product at t; t < 0 means clean data (1.0)."""
        if t < 0:
            return 1.0
        if t >= self.T:
            raise IndexError(f"timestep {t} out of range [0, {self.T})")
        return float(self.alpha_bar[t])

    def snr(self) -> np.ndarray:
        return self.alpha_bar / (1.0 - self.alpha_bar)


def make_linear_schedule(T: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def _check_t(t, sched: NoiseSchedule) -> np.ndarray:
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= sched.T):
        raise IndexError(f"timestep {t} out of range [0, {sched.T})")
    return t


def add_noise(z0: np.ndarray, eps: np.ndarray, t, sched: NoiseSchedule) -> np.ndarray:
    """sqrt(ab_t) z0 + sqrt(1 - ab_t) eps.  ``t`` may be an int or one timestep per leading item."""
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ValueError(f"z0 {z0.shape} and eps {eps.shape} differ")
    t = _check_t(t, sched)
    ab = sched.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (z0.ndim - ab.ndim))
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(z0.dtype)


def mix(z0: np.ndarray, eps: np.ndarray, alpha_bar: float) -> np.ndarray:
    """add_noise with an explicit cumulative product (used for the limits 0 and 1)."""
    return np.sqrt(alpha_bar) * z0 + np.sqrt(1.0 - alpha_bar) * eps


def predict_x0(z_t: np.ndarray, eps_hat: np.ndarray, alpha_bar_t: float) -> np.ndarray:
    ab = max(alpha_bar_t, ALPHA_BAR_FLOOR)
    return (z_t - np.sqrt(1.0 - alpha_bar_t) * eps_hat) / np.sqrt(ab)


def skip_coefficients(alpha_bar, sigma_data: float) -> tuple[np.ndarray, np.ndarray]:
    """(c_skip, c_out) for eps_hat = c_skip z_t + c_out F.

    c_skip z_t is the best linear guess of eps from z_t when z0 has std ``sigma_data``; c_out is the
    std of what remains, so F has a unit-scale target at every t.
    """
    ab = np.asarray(alpha_bar, dtype=np.float64)
    signal = ab * sigma_data ** 2
    total = signal + (1.0 - ab)
    return np.sqrt(1.0 - ab) / total, np.sqrt(signal / total)


def truncated_snr_weight(alpha_bar) -> np.ndarray:
    """Per-item weight max(1, 1/snr) on the eps error, i.e. weight max(snr, 1) on the z0 error."""
    ab = np.asarray(alpha_bar, dtype=np.float64)
    return np.maximum(1.0, (1.0 - ab) / ab)


def reverse_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, t_prev: int,
                 sched: NoiseSchedule, clamp_x0=None) -> np.ndarray:
    """Deterministic (eta = 0) DDIM update from t to t_prev; t_prev = -1 lands on data.

    ``clamp_x0`` optionally projects the clean-sample estimate onto the data range
    before re-noising; the noise estimate itself is left as predicted.
    """
    if t <= t_prev:
        raise ValueError(f"reverse_step needs t > t_prev, got {t} <= {t_prev}")
    if np.shape(z_t) != np.shape(eps_hat):
        raise ValueError(f"z_t {np.shape(z_t)} and eps_hat {np.shape(eps_hat)} differ")
    ab_t = sched.alpha_bar_at(t)
    ab_prev = sched.alpha_bar_at(t_prev)
    x0 = predict_x0(z_t, eps_hat, ab_t)
    if clamp_x0 is not None:
        x0 = clamp_x0(x0)
    out = np.sqrt(ab_prev) * x0 + np.sqrt(1.0 - ab_prev) * eps_hat
    return out.astype(np.asarray(z_t).dtype)


def make_timestep_plan(T: int, n_steps: int) -> list[int]:
    """``n_steps`` strictly decreasing timesteps starting at T-1, evenly spaced."""
    if not 1 <= n_steps <= T:
        raise ValueError(f"n_steps must be in [1, {T}], got {n_steps}")
    steps = np.floor(np.arange(n_steps) * (T / n_steps)).astype(int)
    return [int(T - 1 - s) for s in steps]


def plan_pairs(plan: list[int]) -> list[tuple[int, int]]:
    """(t, t_prev) pairs, the last one ending at -1 (data)."""
    return list(zip(plan, plan[1:] + [-1]))
