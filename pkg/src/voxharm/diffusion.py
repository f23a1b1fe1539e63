"""Noise schedules, diffusion algebra, deterministic DDIM trajectories, and
the Stage-I training objective.

Timesteps are integers in [0, T] where 0 means clean: the cumulative signal
fraction table is extended with alpha_bar(0) = 1 so trajectory endpoints and
the forward/one-step algebra stay exact at the boundaries.  Trajectory step
grids are uniformly spaced over [0, T] including both extremes; inversion and
sampling with the same step count share one grid traversed in opposite
directions, which is what makes invert-then-sample an (approximate) identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .gradients import gradient_map
from .stylestats import EmaStyleRecord, StyleSummary, style_summary

# Denoiser evaluation signature used by trajectories and losses:
# (noisy batch, per-item timestep tensor) -> predicted noise batch.
DenoiseFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule with exact cumulative products, float64 tables."""

    timesteps: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray  # length T+1, alpha_bars[0] = 1.0

    def alpha_bar(self, t) -> torch.Tensor:
        """Cumulative signal fraction at timestep(s) t; accepts int or tensor."""
        table = torch.from_numpy(self.alpha_bars)
        if isinstance(t, torch.Tensor):
            return table.to(t.device)[t.long()]
        return table[int(t)]


def build_schedule(
    timesteps: int = 1000, beta_start: float = 0.0015, beta_end: float = 0.0195
) -> DiffusionSchedule:
    if timesteps < 2:
        raise ValueError("need at least 2 timesteps")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ValueError(f"need 0 < beta_start < beta_end < 1, got [{beta_start}, {beta_end}]")
    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.concatenate([[1.0], np.cumprod(alphas)])
    if not (np.diff(alpha_bars) < 0).all():
        raise ValueError("alpha_bar must be strictly decreasing")
    return DiffusionSchedule(
        timesteps=timesteps,
        beta_start=beta_start,
        beta_end=beta_end,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
    )


def _coeffs(schedule: DiffusionSchedule, t, like: torch.Tensor):
    """sqrt(alpha_bar_t) and sqrt(1 - alpha_bar_t), broadcast to match `like`."""
    ab = schedule.alpha_bar(t).to(like.dtype)
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        shape = (t.shape[0],) + (1,) * (like.ndim - 1)
        ab = ab.reshape(shape)
    return torch.sqrt(ab), torch.sqrt(1.0 - ab)


def forward_diffuse(
    volume: torch.Tensor, t, eps: torch.Tensor, schedule: DiffusionSchedule
) -> torch.Tensor:
    """sqrt(ab_t) * volume + sqrt(1 - ab_t) * eps."""
    if eps.shape != volume.shape:
        raise ValueError(f"noise shape {tuple(eps.shape)} != volume shape {tuple(volume.shape)}")
    sq_ab, sq_1mab = _coeffs(schedule, t, volume)
    return sq_ab * volume + sq_1mab * eps


def one_step_estimate(
    noisy: torch.Tensor, t, predicted_eps: torch.Tensor, schedule: DiffusionSchedule
) -> torch.Tensor:
    """Algebraic inverse of forward_diffuse: (noisy - sqrt(1-ab)*eps)/sqrt(ab)."""
    if predicted_eps.shape != noisy.shape:
        raise ValueError("shape mismatch between noisy input and predicted noise")
    sq_ab, sq_1mab = _coeffs(schedule, t, noisy)
    return (noisy - sq_1mab * predicted_eps) / sq_ab


def noise_loss(eps: torch.Tensor, predicted_eps: torch.Tensor) -> torch.Tensor:
    if eps.shape != predicted_eps.shape:
        raise ValueError("shape mismatch in noise loss")
    return ((eps - predicted_eps) ** 2).mean()


def gradient_consistency_loss(grad_source: torch.Tensor, estimate: torch.Tensor) -> torch.Tensor:
    """Mean squared gap between the source gradient map and the estimate's."""
    if grad_source.shape != estimate.shape:
        raise ValueError("shape mismatch in gradient consistency loss")
    return ((grad_source - gradient_map(estimate)) ** 2).mean()


def step_grid(timesteps: int, n_steps: int) -> np.ndarray:
    """n_steps+1 strictly increasing grid points from 0 to T inclusive."""
    if n_steps < 0:
        raise ValueError("step count must be non-negative")
    if n_steps == 0:
        return np.array([0], dtype=np.int64)
    if n_steps > timesteps:
        raise ValueError(f"cannot take {n_steps} steps out of {timesteps}")
    grid = np.linspace(0, timesteps, n_steps + 1).round().astype(np.int64)
    if (np.diff(grid) <= 0).any():
        raise ValueError("degenerate step grid")
    return grid


def ddim_invert(
    volume: torch.Tensor,
    denoise: DenoiseFn,
    schedule: DiffusionSchedule,
    n_steps: int,
) -> torch.Tensor:
    """Deterministic inversion along the ascending step grid; 0 steps = identity.

    Each step re-noises the current one-step clean estimate to the next grid
    level using the model's own noise prediction.
    """
    grid = step_grid(schedule.timesteps, n_steps)
    x = volume
    for k in range(len(grid) - 1):
        t_cur, t_next = int(grid[k]), int(grid[k + 1])
        t_tensor = torch.full((x.shape[0],), t_cur, dtype=torch.long, device=x.device)
        eps = denoise(x, t_tensor)
        est = one_step_estimate(x, t_tensor, eps, schedule)
        sq_ab, sq_1mab = _coeffs(schedule, t_next, x)
        x = sq_ab * est + sq_1mab * eps
    return x


def ddim_sample(
    latent: torch.Tensor,
    denoise: DenoiseFn,
    schedule: DiffusionSchedule,
    n_steps: int,
    grad_steps: int | None = None,
) -> torch.Tensor:
    """Deterministic sampling along the descending step grid; 0 steps = identity.

    Output is clamped to [-1, 1] after the final step only.  With grad_steps
    set, only that many trailing steps run with autograd enabled; the earlier
    trajectory is treated as a constant (cheap fine-tuning gradient path).
    """
    grid = step_grid(schedule.timesteps, n_steps)
    x = latent
    for k in range(len(grid) - 1, 0, -1):
        with_grad = torch.is_grad_enabled() and (grad_steps is None or k <= grad_steps)
        with torch.set_grad_enabled(with_grad):
            if not with_grad:
                x = x.detach()
            t_cur, t_prev = int(grid[k]), int(grid[k - 1])
            t_tensor = torch.full((x.shape[0],), t_cur, dtype=torch.long, device=x.device)
            eps = denoise(x, t_tensor)
            est = one_step_estimate(x, t_tensor, eps, schedule)
            sq_ab, sq_1mab = _coeffs(schedule, t_prev, x)
            x = sq_ab * est + sq_1mab * eps
    if n_steps > 0:
        x = torch.clamp(x, -1.0, 1.0)
    return x


@dataclass
class StageOneWeights:
    noise: float = 1.0
    gradient: float = 1.0
    ema: float = 1.0


def stage1_loss(
    volumes: torch.Tensor,
    grad_maps: torch.Tensor,
    sequences: list[int],
    t: torch.Tensor,
    eps: torch.Tensor,
    denoise: DenoiseFn,
    record: EmaStyleRecord,
    schedule: DiffusionSchedule,
    weights: StageOneWeights | None = None,
    update_record: bool = True,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Assemble the Stage-I objective for one batch.

    volumes and grad_maps are (B, 1, H, W, D); t is (B,) integer timesteps and
    eps the matching noise draws.  Noise and gradient terms cover every item;
    the EMA term covers only items gated at t <= tau, with the record updated
    serially in batch order before each item's consistency loss (the record
    side never carries gradient).
    """
    weights = weights or StageOneWeights()
    noisy = forward_diffuse(volumes, t, eps, schedule)
    predicted = denoise(noisy, t)
    l_noise = noise_loss(eps, predicted)
    estimates = one_step_estimate(noisy, t, predicted, schedule)

    l_grad = volumes.new_zeros(())
    for i in range(volumes.shape[0]):
        l_grad = l_grad + gradient_consistency_loss(grad_maps[i, 0], estimates[i, 0])
    l_grad = l_grad / volumes.shape[0]

    l_ema = volumes.new_zeros(())
    gated = 0
    for i in range(volumes.shape[0]):
        t_i = int(t[i])
        if t_i > record.tau:
            continue
        summary = style_summary(
            estimates[i, 0],
            k=record.k,
            v_min=record.v_min,
            v_max=record.v_max,
            bandwidth=record.bandwidth,
        )
        if update_record:
            record.update(sequences[i], summary, t_i)
        if record.initialized(sequences[i]):
            l_ema = l_ema + record.consistency_loss(sequences[i], summary)
            gated += 1
    if gated:
        l_ema = l_ema / gated

    total = weights.noise * l_noise + weights.gradient * l_grad + weights.ema * l_ema
    parts = {
        "noise": float(l_noise.detach()),
        "gradient": float(l_grad.detach()),
        "ema": float(l_ema.detach()),
    }
    return total, parts
