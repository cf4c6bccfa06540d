"""Noise schedule, forward marginal, noise-prediction loss, CFG, DDIM.

All functions take latent tensors of shape (B, C, T, F) or (C, T, F) and a
1-based timestep t in [1, T]; schedule tables are float64 so cumulative
products stay exact at test tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch


@dataclass
class NoiseSchedule:
    num_steps: int
    beta: torch.Tensor       # (T,) float64, beta[t-1] is beta_t
    alpha: torch.Tensor      # 1 - beta
    alpha_bar: torch.Tensor  # cumulative product of alpha

    def alpha_bar_at(self, t: int) -> float:
        """alpha_bar for 1-based t; t=0 means the clean-data limit (1.0)."""
        if t == 0:
            return 1.0
        return float(self.alpha_bar[t - 1])

    def validate_t(self, t: torch.Tensor | int) -> None:
        t = torch.as_tensor(t)
        if torch.any(t < 1) or torch.any(t > self.num_steps):
            raise ValueError(f"t out of range [1, {self.num_steps}]")


def build_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if num_steps < 1:
        raise ValueError("num_steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]")
    beta = torch.linspace(beta_start, beta_end, num_steps, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    return NoiseSchedule(num_steps, beta, alpha, alpha_bar)


def forward_marginal(z0: torch.Tensor, t: torch.Tensor | int, schedule: NoiseSchedule,
                     noise: torch.Tensor) -> torch.Tensor:
    """Closed-form q(z_t | z_0): sqrt(abar_t) z0 + sqrt(1 - abar_t) noise."""
    if noise.shape != z0.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != z0 shape {tuple(z0.shape)}")
    schedule.validate_t(t)
    t = torch.as_tensor(t)
    abar = schedule.alpha_bar.to(z0.dtype)[t - 1]
    while abar.ndim < z0.ndim:
        abar = abar.unsqueeze(-1)
    return torch.sqrt(abar) * z0 + torch.sqrt(1.0 - abar) * noise


def training_loss(denoiser, z0: torch.Tensor, cond, t: torch.Tensor | int,
                  schedule: NoiseSchedule, generator: torch.Generator | None = None,
                  noise: torch.Tensor | None = None) -> torch.Tensor:
    """Noise-prediction MSE: ||eps - denoiser(z_t, t, cond)||^2, mean over elements."""
    if noise is None:
        noise = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    z_t = forward_marginal(z0, t, schedule, noise)
    pred = denoiser(z_t, torch.as_tensor(t), cond)
    if not torch.all(torch.isfinite(pred)):
        raise FloatingPointError("denoiser produced non-finite output")
    return torch.mean((noise - pred) ** 2)


def cfg_combine(eps_cond: torch.Tensor, eps_null: torch.Tensor, w: float) -> torch.Tensor:
    """Guided estimate: w * eps_cond + (1 - w) * eps_null."""
    if eps_cond.shape != eps_null.shape:
        raise ValueError(
            f"shape mismatch: {tuple(eps_cond.shape)} vs {tuple(eps_null.shape)}"
        )
    return w * eps_cond + (1.0 - w) * eps_null


def x0_clip(xhat0: torch.Tensor, bound: float) -> torch.Tensor:
    if bound <= 0:
        raise ValueError("bound must be positive")
    return torch.clamp(xhat0, -bound, bound)


@dataclass
class SamplerConfig:
    num_steps: int = 200
    guidance_scale: float = 3.0
    eta: float = 0.0
    seed: int = 0
    x0_bound: float | None = 4.0

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if not (0.0 <= self.eta <= 1.0):
            raise ValueError("eta must be in [0, 1]")


def ddim_timesteps(num_train_steps: int, num_sample_steps: int) -> list[int]:
    """Evenly spaced 1-based subsequence from ~1 up to T, descending."""
    if num_sample_steps > num_train_steps:
        raise ValueError(
            f"cannot take {num_sample_steps} DDIM steps from a {num_train_steps}-step schedule"
        )
    ts = torch.linspace(1, num_train_steps, num_sample_steps).round().to(torch.int64)
    ts = torch.unique(ts)
    return ts.flip(0).tolist()


def ddim_sigma(schedule: NoiseSchedule, t: int, t_prev: int, eta: float) -> float:
    abar_t = schedule.alpha_bar_at(t)
    abar_prev = schedule.alpha_bar_at(t_prev)
    return eta * (
        ((1.0 - abar_prev) / (1.0 - abar_t)) * (1.0 - abar_t / abar_prev)
    ) ** 0.5


def ddim_sample(denoiser, cond, schedule: NoiseSchedule, sampler: SamplerConfig,
                shape: tuple[int, ...], cond_null=None,
                z_init: torch.Tensor | None = None) -> torch.Tensor:
    """DDIM reverse chain from seeded N(0, I) noise.

    Each step predicts noise under the condition (combined with the null
    condition at guidance_scale when cond_null is given), forms the x0
    estimate, and takes the DDIM update. Deterministic for eta=0.
    """
    generator = torch.Generator().manual_seed(sampler.seed)
    if z_init is None:
        z = torch.randn(shape, generator=generator)
    else:
        z = z_init.clone()
    steps = ddim_timesteps(schedule.num_steps, sampler.num_steps)

    for i, t in enumerate(steps):
        t_prev = steps[i + 1] if i + 1 < len(steps) else 0
        t_batch = torch.full(shape[:1], t, dtype=torch.int64) if len(shape) == 4 else torch.tensor(t)
        eps = denoiser(z, t_batch, cond)
        if cond_null is not None and sampler.guidance_scale != 1.0:
            eps_null = denoiser(z, t_batch, cond_null)
            eps = cfg_combine(eps, eps_null, sampler.guidance_scale)

        abar_t = schedule.alpha_bar_at(t)
        abar_prev = schedule.alpha_bar_at(t_prev)
        xhat0 = (z - (1.0 - abar_t) ** 0.5 * eps) / abar_t ** 0.5
        if sampler.x0_bound is not None:
            xhat0 = x0_clip(xhat0, sampler.x0_bound)
        sigma = ddim_sigma(schedule, t, t_prev, sampler.eta)
        dir_coeff = max(1.0 - abar_prev - sigma**2, 0.0) ** 0.5
        z = abar_prev**0.5 * xhat0 + dir_coeff * eps
        if sigma > 0:
            z = z + sigma * torch.randn(shape, generator=generator)
    return z
