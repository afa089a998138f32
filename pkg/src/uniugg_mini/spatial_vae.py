"""Spatial-VAE: token grid <-> 4-channel latent grid at twice the spatial resolution."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import PairBatch
from .errors import ConfigurationError, ValidationError
from .layers import Block, check_finite

LOGVAR_MIN, LOGVAR_MAX = -30.0, 20.0


@dataclass(frozen=True)
class VAEConfig:
    in_dim: int = 128
    grid: int = 8
    hidden: int = 64  # channels after the initial conv (full scale: 256)
    width: int = 64  # channels at latent resolution (full scale: 128)
    latent_channels: int = 4
    depth: int = 2
    heads: int = 4

    @classmethod
    def full_scale(cls, depth: int = 1) -> "VAEConfig":
        return cls(in_dim=1024, grid=14, hidden=256, width=128, latent_channels=4, depth=depth, heads=8)

    @property
    def latent_grid(self) -> int:
        return 2 * self.grid


@dataclass
class LatentDistribution:
    mean: torch.Tensor  # (B, L_h, L_w, C)
    logvar: torch.Tensor

    def __post_init__(self):
        self.logvar = self.logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)


def reparameterize(dist: LatentDistribution, noise_seed: int | None = None, *, noise: torch.Tensor | None = None,
                   deterministic: bool = False) -> torch.Tensor:
    """``mean + exp(logvar / 2) * eps``; eps from ``noise`` or a generator seeded with ``noise_seed``."""
    if deterministic:
        return dist.mean
    if noise is None:
        g = torch.Generator().manual_seed(0 if noise_seed is None else int(noise_seed))
        noise = torch.randn(dist.mean.shape, generator=g, dtype=dist.mean.dtype)
    return dist.mean + torch.exp(0.5 * dist.logvar) * noise


def kl_loss(dist: LatentDistribution) -> torch.Tensor:
    """Closed-form KL to N(0, I), averaged over elements."""
    m, lv = dist.mean, dist.logvar
    return 0.5 * (m * m + torch.exp(lv) - 1 - lv).mean()


class SpatialVAE(nn.Module):
    def __init__(self, cfg: VAEConfig = VAEConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg
        n_lat = c.latent_grid * c.latent_grid
        # encoder
        self.conv_in = nn.Conv2d(c.in_dim, c.hidden, 3, padding=1)
        self.up1 = nn.ConvTranspose2d(c.hidden, c.width, 2, stride=2)
        self.up2 = nn.Conv2d(c.width, c.width, 3, padding=1)
        self.enc_pos = nn.Parameter(torch.randn(1, n_lat, c.width) * 0.02)
        self.enc_blocks = nn.ModuleList(Block(c.width, c.heads) for _ in range(c.depth))
        self.enc_norm = nn.LayerNorm(c.width)
        self.conv_mu = nn.Conv2d(c.width, c.latent_channels, 3, padding=1)
        self.conv_logvar = nn.Conv2d(c.width, c.latent_channels, 3, padding=1)
        # decoder
        self.pre = nn.Conv2d(c.latent_channels, c.width, 3, padding=1)
        self.dec_pos = nn.Parameter(torch.randn(1, n_lat, c.width) * 0.02)
        self.dec_blocks = nn.ModuleList(Block(c.width, c.heads) for _ in range(c.depth))
        self.dec_norm = nn.LayerNorm(c.width)
        self.down1 = nn.Conv2d(c.width, c.width, 3, padding=1)
        self.down2 = nn.Conv2d(c.width, c.hidden, 2, stride=2)
        self.conv_out = nn.Conv2d(c.hidden, c.in_dim, 3, padding=1)
        self.decoder: nn.Module | None = None
        self.rgb_head: nn.Module | None = None

    def _attend(self, x, pos, blocks, norm):
        b, ch, h, w = x.shape
        seq = x.flatten(2).transpose(1, 2) + pos
        for blk in blocks:
            seq = blk(seq)
        return norm(seq).transpose(1, 2).reshape(b, ch, h, w)

    def encode(self, z: torch.Tensor) -> LatentDistribution:
        """(B, H_t, W_t, d) -> distribution over (B, 2H_t, 2W_t, 4)."""
        if z.dim() != 4 or z.shape[1] != z.shape[2]:
            raise ValidationError(f"expected a square (B, h, w, d) grid, got {tuple(z.shape)}")
        x = z.permute(0, 3, 1, 2)
        x = F.silu(self.conv_in(x))
        x = F.silu(self.up1(x))
        x = F.silu(self.up2(x))
        x = self._attend(x, self.enc_pos, self.enc_blocks, self.enc_norm)
        mu = self.conv_mu(x).permute(0, 2, 3, 1)
        logvar = self.conv_logvar(x).permute(0, 2, 3, 1)
        check_finite(mu, "VAE mean")
        check_finite(logvar, "VAE log-variance")
        return LatentDistribution(mu, logvar)

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        """(B, L_h, L_w, 4) -> (B, L_h/2, L_w/2, d)."""
        x = latent.permute(0, 3, 1, 2)
        x = self.pre(x)
        x = self._attend(x, self.dec_pos, self.dec_blocks, self.dec_norm)
        x = F.silu(self.down1(x))
        x = F.silu(self.down2(x))
        x = self.conv_out(x)
        return x.permute(0, 2, 3, 1)

    def forward(self, z: torch.Tensor, noise_seed: int | None = None, deterministic: bool = False):
        dist = self.encode(z)
        return self.decode(reparameterize(dist, noise_seed, deterministic=deterministic)), dist

    def attach_decoder(self, decoder: nn.Module, rgb_head: nn.Module | None = None) -> None:
        """Link the spatial decoder (and optionally the RGB head) for joint fine-tuning."""
        # stored outside the module tree so VAE checkpoints stay self-contained
        object.__setattr__(self, "decoder", decoder)
        object.__setattr__(self, "rgb_head", rgb_head)


def vae_loss(vae: SpatialVAE, z_i: torch.Tensor, z_j: torch.Tensor, batch: PairBatch, gamma: float = 1e-4,
             noise_i: torch.Tensor | None = None, noise_j: torch.Tensor | None = None, noise_seed: int = 0,
             mse_both_views: bool = True, **spatial_kw) -> dict[str, torch.Tensor]:
    """``L_s + L_mse + gamma * L_kl`` on reconstructed token grids, with its components.

    ``z_i``/``z_j`` come from the frozen encoder. The reconstructions go through the
    attached spatial decoder (``spatial_kw`` is forwarded to ``spatial_loss``).
    """
    from .spatial_decoder import spatial_loss

    if vae.decoder is None:
        raise ConfigurationError("vae_loss needs a spatial decoder attached via attach_decoder()")
    z_i, z_j = z_i.detach(), z_j.detach()
    dist_i, dist_j = vae.encode(z_i), vae.encode(z_j)
    t_i = reparameterize(dist_i, noise_seed, noise=noise_i)
    t_j = reparameterize(dist_j, noise_seed + 1, noise=noise_j)
    rec_i, rec_j = vae.decode(t_i), vae.decode(t_j)
    l_mse = ((rec_i - z_i) ** 2).mean()
    if mse_both_views:
        l_mse = 0.5 * (l_mse + ((rec_j - z_j) ** 2).mean())
    l_kl = kl_loss(dist_i) + kl_loss(dist_j)
    pred_i, pred_j = vae.decoder(rec_i, rec_j)
    if spatial_kw.get("lambda2", 1.0) and vae.rgb_head is not None:
        spatial_kw.setdefault("rgb_i", vae.rgb_head(rec_i))
        spatial_kw.setdefault("rgb_j", vae.rgb_head(rec_j))
    elif vae.rgb_head is None:
        spatial_kw["lambda2"] = 0.0
    ls = spatial_loss(pred_i, pred_j, batch, **spatial_kw)
    total = ls["total"] + l_mse + gamma * l_kl
    return {"s": ls["total"], "mse": l_mse, "kl": l_kl, "total": total,
            "conf": ls["conf"], "match": ls["match"], "rgb": ls["rgb"]}
