"""DDPM baseline on the shared vector-field backbone: noising, epsilon loss, DDIM sampling, SNR curves."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .conditioning import ConditionBatch, dropout_mask
from .flow import masked_sq_error, od_loss
from .model import PreparedData, TrainConfig, VectorFieldModel

BETA_START = 1e-6
BETA_END = 5e-2


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; arrays are indexed by step - 1 for steps 1..T."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @classmethod
    def linear(cls, T: int = 300, beta_start: float = BETA_START, beta_end: float = BETA_END) -> "NoiseSchedule":
        if T < 1:
            raise ValueError("T must be >= 1")
        betas = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_end])
        alphas = 1.0 - betas
        return cls(T, betas, alphas, np.cumprod(alphas))

    def alpha_bar(self, step) -> np.ndarray:
        """``alpha_bar`` at integer step(s); step 0 is the clean signal (1.0)."""
        step = np.asarray(step)
        return np.where(step == 0, 1.0, self.alpha_bars[np.maximum(step, 1) - 1])


def forward_noise(x_data, step, rng: np.random.Generator, schedule: NoiseSchedule, eps=None):
    step = np.asarray(step)
    if np.any(step < 1) or np.any(step > schedule.T):
        raise ValueError(f"step must lie in [1, {schedule.T}]")
    x_data = np.asarray(x_data, dtype=np.float64)
    if eps is None:
        eps = rng.standard_normal(x_data.shape)
    ab = schedule.alpha_bar(step)
    if ab.ndim == 1 and x_data.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * x_data + np.sqrt(1.0 - ab) * eps, eps


def ddpm_loss(model: VectorFieldModel, batch: PreparedData, rng: np.random.Generator, cfg: TrainConfig,
              schedule: NoiseSchedule, noise: tuple | None = None) -> tuple[nn.Tensor, dict]:
    """Epsilon-prediction MSE plus the same auxiliary fine-OD loss as the flow objective."""
    b = len(batch)
    if noise is None:
        step = rng.integers(1, schedule.T + 1, size=b)
        eps = rng.standard_normal(batch.x1.shape)
        dropped = dropout_mask(b, cfg.cond_dropout, rng)
    else:
        step, eps, dropped = (np.asarray(a) for a in noise)
    x_noisy, eps = forward_noise(batch.x1, step, rng, schedule, eps)
    cond = batch.cond.with_null(dropped)
    e_c = model.encoder(cond)
    pred = model.forward(x_noisy, step / schedule.T, cond, e_c=e_c)
    mse = masked_sq_error(pred, eps, batch.mask)
    loss = mse
    parts = {"eps": float(mse.data)}
    if cfg.lambda_od > 0:
        aux = od_loss(model, e_c, batch.od_target, ~np.asarray(dropped, dtype=bool))
        loss = loss + nn.mul(aux, cfg.lambda_od)
        parts["od"] = float(aux.data)
    if not np.isfinite(loss.data):
        raise nn.TrainingAbort(f"non-finite loss {parts}")
    return loss, parts


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """Uniform sub-schedule ending at T, e.g. T=300, steps=10 -> 30, 60, ..., 300."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in [1, {T}]")
    return np.unique(np.round(np.linspace(0, T, steps + 1)).astype(int))[1:]


def ddim_integrate(eps_fn, x_T: np.ndarray, steps: int, schedule: NoiseSchedule) -> np.ndarray:
    """Deterministic (eta = 0) DDIM from step T down to the clean signal.

    ``eps_fn(x, step)`` predicts the noise at integer ``step``.
    """
    taus = ddim_timesteps(schedule.T, steps)
    x = np.array(x_T, dtype=np.float64)
    for i in range(len(taus) - 1, -1, -1):
        tau = taus[i]
        prev = taus[i - 1] if i > 0 else 0
        ab = schedule.alpha_bar(tau)
        ab_prev = schedule.alpha_bar(prev)
        eps = eps_fn(x, tau)
        x0_hat = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        x = np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps
    return x


def ddim_sample(model: VectorFieldModel, cond: ConditionBatch, steps: int, schedule: NoiseSchedule,
                rng: np.random.Generator | None = None, x_T: np.ndarray | None = None):
    """Returns ``(keypoints (B, K, 2), od_output (B, 6))`` like the flow sampler."""
    rng = rng or np.random.default_rng()
    if x_T is None:
        x_T = rng.standard_normal((len(cond), model.dim))
    with nn.no_grad():
        e_c = model.encoder(cond)
        od = model.od_head(e_c).data

    def eps_fn(x, step):
        with nn.no_grad():
            return model.forward(x, step / schedule.T, cond, e_c=e_c).data

    x0 = ddim_integrate(eps_fn, x_T, steps, schedule)
    return x0.reshape(len(cond), model.arch.K, 2), od


def snr_profile(schedule: NoiseSchedule, signal_scale: float) -> np.ndarray:
    """Per-step SNR ``s^2 abar / (1 - abar)`` for steps 1..T."""
    if signal_scale <= 0:
        raise ValueError("signal_scale must be positive")
    ab = schedule.alpha_bars
    return signal_scale ** 2 * ab / (1.0 - ab)


def snr_crossing(snr: np.ndarray, level: float = 1.0) -> int | None:
    """First step (1-based) at which the SNR falls below ``level``."""
    below = np.flatnonzero(snr < level)
    return int(below[0]) + 1 if below.size else None


def write_snr_csv(path, schedule: NoiseSchedule, scales) -> None:
    curves = {s: snr_profile(schedule, s) for s in scales}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step," + ",".join(f"snr_scale_{s:g}" for s in scales) + "\n")
        for i in range(schedule.T):
            fh.write(f"{i + 1}," + ",".join(f"{curves[s][i]:.9g}" for s in scales) + "\n")
