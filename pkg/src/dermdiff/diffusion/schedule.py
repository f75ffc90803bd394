"""Noise schedule, forward noising, and the noise-prediction objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise levels: beta, alpha = 1 - beta, alpha_bar = cumprod(alpha)."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule over T steps."""
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def forward_diffuse(x0: np.ndarray, t, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Noised value at step t: sqrt(abar_t)*x0 + sqrt(1-abar_t)*eps.

    `t` may be a scalar step or one step per leading-axis element of x0.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} != eps shape {eps.shape}")
    t_arr = np.asarray(t)
    if (t_arr < 0).any() or (t_arr >= schedule.T).any():
        raise ValueError(f"t out of range [0, {schedule.T}): {t}")
    abar = schedule.alpha_bar[t_arr]
    if t_arr.ndim == 1:
        abar = abar.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def diffusion_loss(eps_pred: np.ndarray, eps: np.ndarray) -> float:
    """Mean squared error between predicted and sampled noise over all coordinates."""
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps_pred.shape != eps.shape:
        raise ValueError(f"shape mismatch: {eps_pred.shape} vs {eps.shape}")
    d = eps_pred - eps
    return float((d * d).mean())


def diffusion_loss_grad(eps_pred: np.ndarray, eps: np.ndarray) -> tuple[float, np.ndarray]:
    """Loss plus its gradient w.r.t. the prediction."""
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps_pred.shape != eps.shape:
        raise ValueError(f"shape mismatch: {eps_pred.shape} vs {eps.shape}")
    d = eps_pred - eps
    return float((d * d).mean()), 2.0 * d / d.size
