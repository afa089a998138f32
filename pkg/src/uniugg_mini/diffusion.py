"""DDPM forward process, epsilon-prediction loss, conditional denoiser and reverse sampler."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import NumericError, ValidationError
from .layers import Block, sinusoidal_embedding


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule; index ``t`` runs 1..steps and ``alpha_bar(0) == 1``."""

    betas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.betas)

    def beta(self, t: int) -> float:
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def posterior_variance(self, t: int) -> float:
        return (1 - self.alpha_bar(t - 1)) / (1 - self.alpha_bar(t)) * self.beta(t)


def make_schedule(steps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if steps < 1:
        raise ValidationError("schedule needs at least one step")
    if not 0 < beta_start < beta_end < 1:
        raise ValidationError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    return NoiseSchedule(betas, np.cumprod(1.0 - betas))


def _coef(values, like: torch.Tensor) -> torch.Tensor:
    c = torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=like.dtype)
    return c.view(-1, *([1] * (like.dim() - 1))) if c.dim() else c


def _check_t(t, schedule: NoiseSchedule) -> np.ndarray:
    ts = np.asarray(t)
    if ts.size == 0 or ts.min() < 1 or ts.max() > schedule.steps:
        raise ValidationError(f"timestep outside 1..{schedule.steps}: {t}")
    return ts


def q_sample(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` scalar or one per batch item."""
    if eps.shape != x0.shape:
        raise ValidationError("noise shape must match the latent")
    ts = _check_t(t, schedule)
    abar = schedule.alpha_bars[ts - 1]
    return _coef(np.sqrt(abar), x0) * x0 + _coef(np.sqrt(1 - abar), x0) * eps


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 4
    latent_grid: int = 16
    dim: int = 64
    depth: int = 2
    heads: int = 4
    context_dim: int = 128


class Denoiser(nn.Module):
    """Transformer over latent cells with cross-attention to conditioning features."""

    def __init__(self, cfg: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.cfg = cfg
        n = cfg.latent_grid * cfg.latent_grid
        self.inp = nn.Linear(cfg.latent_channels, cfg.dim)
        self.pos = nn.Parameter(torch.randn(1, n, cfg.dim) * 0.02)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.dim, cfg.dim), nn.SiLU(), nn.Linear(cfg.dim, cfg.dim))
        self.blocks = nn.ModuleList(
            Block(cfg.dim, cfg.heads, cross=True, context_dim=cfg.context_dim) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.dim)
        self.out = nn.Linear(cfg.dim, cfg.latent_channels)

    def forward(self, x: torch.Tensor, context: torch.Tensor, t) -> torch.Tensor:
        """(B, h, w, C) noisy latent, (B, N_c, d_c) context, timesteps -> predicted noise."""
        b, h, w, c = x.shape
        t = torch.as_tensor(t).reshape(-1).expand(b) if np.ndim(t) == 0 else torch.as_tensor(t)
        temb = self.time_mlp(sinusoidal_embedding(t, self.cfg.dim).to(x.dtype))[:, None]
        seq = self.inp(x.reshape(b, h * w, c)) + self.pos
        for blk in self.blocks:
            seq = blk(seq + temb, context=context)
        return self.out(self.norm(seq)).view(b, h, w, c)


def gen_loss(denoiser, x0: torch.Tensor, context, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between predicted and true noise."""
    noisy = q_sample(x0, t, eps, schedule)
    return ((denoiser(noisy, context, t) - eps) ** 2).mean()


def p_step(x_t: torch.Tensor, eps_pred: torch.Tensor, t: int, schedule: NoiseSchedule,
           noise: torch.Tensor | None = None) -> torch.Tensor:
    """One reverse step: posterior mean, plus ``sqrt(beta_tilde_t) * noise`` when noise is given."""
    beta = schedule.beta(t)
    mean = (x_t - beta / np.sqrt(1 - schedule.alpha_bar(t)) * eps_pred) / np.sqrt(1 - beta)
    if noise is not None and t > 1:
        mean = mean + np.sqrt(schedule.posterior_variance(t)) * noise
    return mean


@torch.no_grad()
def sample(denoiser, context, schedule: NoiseSchedule, seed: int, mode: str = "ancestral",
           shape: tuple[int, ...] | None = None, init: torch.Tensor | None = None, trace=None) -> torch.Tensor:
    """Reverse diffusion from seeded N(0, 1) noise (or ``init``) down to t = 0.

    ``mode='deterministic'`` adds no noise between steps. ``trace`` may be a writable
    text file; one JSON line ``{step, mean, std}`` is written per step.
    """
    if mode not in ("ancestral", "deterministic"):
        raise ValidationError(f"unknown sampling mode {mode!r}")
    g = torch.Generator().manual_seed(int(seed))
    dtype = context.dtype if isinstance(context, torch.Tensor) else torch.float32
    if init is None:
        if shape is None:
            cfg = denoiser.cfg
            shape = (context.shape[0], cfg.latent_grid, cfg.latent_grid, cfg.latent_channels)
        x = torch.randn(shape, generator=g, dtype=dtype)
    else:
        x = init.clone()
    for t in range(schedule.steps, 0, -1):
        eps = denoiser(x, context, t)
        noise = torch.randn(x.shape, generator=g, dtype=x.dtype) if mode == "ancestral" and t > 1 else None
        x = p_step(x, eps, t, schedule, noise)
        if not torch.isfinite(x).all():
            raise NumericError(f"non-finite latent at sampling step t={t}")
        if trace is not None:
            trace.write(json.dumps({"step": t, "mean": float(x.mean()), "std": float(x.std())}) + "\n")
    return x
