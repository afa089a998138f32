"""Patch tokenizer, ViT encoder producing token grids, RGB head and its reconstruction loss."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError
from .layers import Block, check_finite


@dataclass
class TokenGrid:
    """Token grid ``(..., H_t, W_t, d)`` tied to the image size it was computed from."""

    tokens: torch.Tensor
    patch_size: int
    source_size: tuple[int, int]

    def __post_init__(self):
        h, w = self.source_size
        ht, wt = self.tokens.shape[-3:-1]
        if ht * self.patch_size != h or wt * self.patch_size != w:
            raise ValidationError(f"grid {ht}x{wt} with patch {self.patch_size} does not tile {h}x{w}")

    @property
    def grid_shape(self) -> tuple[int, int]:
        return tuple(self.tokens.shape[-3:-1])

    @property
    def dim(self) -> int:
        return self.tokens.shape[-1]

    def flat(self) -> torch.Tensor:
        return self.tokens.flatten(-3, -2)


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    patch_size: int = 8
    dim: int = 128
    depth: int = 4
    heads: int = 4

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValidationError("dim must be divisible by heads")
        if self.depth < 1:
            raise ValidationError("depth must be >= 1")
        if self.image_size % self.patch_size:
            raise ValidationError("image size must be divisible by patch size")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size


def patchify(image: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(..., H, W, C) -> (..., H/p, W/p, p*p*C), patch pixels in row-major (row, col, channel) order."""
    image = torch.as_tensor(image)
    *lead, h, w, c = image.shape
    p = patch_size
    if h % p or w % p:
        raise ValidationError(f"image {h}x{w} not divisible by patch size {p}")
    x = image.reshape(*lead, h // p, p, w // p, p, c)
    x = x.movedim(-4, -3)  # (..., H/p, W/p, p, p, C)
    return x.reshape(*lead, h // p, w // p, p * p * c)


def unpatchify(patches: torch.Tensor, patch_size: int, channels: int = 3) -> torch.Tensor:
    *lead, ht, wt, _ = patches.shape
    p = patch_size
    x = patches.reshape(*lead, ht, wt, p, p, channels).movedim(-3, -4)
    return x.reshape(*lead, ht * p, wt * p, channels)


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        p = cfg.patch_size
        self.patch_embed = nn.Linear(3 * p * p, cfg.dim)
        self.pos_embed = nn.Parameter(torch.randn(1, cfg.grid * cfg.grid, cfg.dim) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) -> (B, H_t, W_t, d)."""
        patches = patchify(image, self.cfg.patch_size)
        b, ht, wt, _ = patches.shape
        if ht * wt != self.pos_embed.shape[1]:
            raise ValidationError(f"expected a {self.cfg.grid}x{self.cfg.grid} grid, got {ht}x{wt}")
        x = self.patch_embed(patches.flatten(1, 2)) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        x = self.norm(x)
        check_finite(x, "encoder output")
        return x.view(b, ht, wt, -1)

    def encode(self, image: torch.Tensor) -> TokenGrid:
        image = torch.as_tensor(image)
        squeeze = image.dim() == 3
        tokens = self(image[None] if squeeze else image)
        return TokenGrid(tokens[0] if squeeze else tokens, self.cfg.patch_size, tuple(image.shape[-3:-1]))


class RgbHead(nn.Module):
    """Per-token linear map to a p x p RGB block, squashed to [0, 1] by a sigmoid."""

    def __init__(self, dim: int, patch_size: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Linear(dim, 3 * patch_size * patch_size)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return unpatchify(torch.sigmoid(self.proj(tokens)), self.patch_size)


class PerceptualProxy(nn.Module):
    """Frozen random-weight feature pyramid standing in for a learned perceptual metric.

    Stage 0 keeps the raw pixels plus a constant channel before normalization, so
    the distance is zero only for identical images.
    """

    SEED = 7919
    WIDTHS = (8, 16, 32)

    def __init__(self):
        super().__init__()
        g = torch.Generator().manual_seed(self.SEED)
        c_in = 3
        for k, c_out in enumerate(self.WIDTHS):
            w = torch.randn(c_out, c_in, 3, 3, generator=g, dtype=torch.float64) / math.sqrt(9 * c_in)
            b = torch.randn(c_out, generator=g, dtype=torch.float64) * 0.1
            self.register_buffer(f"w{k}", w)
            self.register_buffer(f"b{k}", b)
            c_in = c_out

    def features(self, image: torch.Tensor) -> list[torch.Tensor]:
        """(B, H, W, 3) -> unit-normalized feature maps (B, C_k, H_k, W_k)."""
        x = image.movedim(-1, -3)
        feats = []
        h = x
        for k in range(len(self.WIDTHS)):
            w = getattr(self, f"w{k}").to(x.dtype)
            b = getattr(self, f"b{k}").to(x.dtype)
            h = torch.tanh(F.conv2d(h, w, b, stride=1 if k == 0 else 2, padding=1))
            f = torch.cat([x, torch.ones_like(x[:, :1]), h], dim=1) if k == 0 else h
            feats.append(f / torch.sqrt((f * f).sum(dim=1, keepdim=True) + 1e-10))
        return feats

    def forward(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        dist = a.new_zeros(())
        for fa, fb in zip(self.features(a), self.features(b)):
            dist = dist + ((fa - fb) ** 2).sum(dim=1).mean()
        return dist


_PROXY: PerceptualProxy | None = None


def perceptual_proxy(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    global _PROXY
    if _PROXY is None:
        _PROXY = PerceptualProxy()
    return _PROXY(a.reshape(-1, *a.shape[-3:]), b.reshape(-1, *b.shape[-3:]))


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 7, sigma: float = 1.5) -> torch.Tensor:
    """Mean structural similarity of (..., H, W, 3) images in [0, 1] (valid-window Gaussian SSIM)."""
    x = a.reshape(-1, *a.shape[-3:]).movedim(-1, 1)
    y = b.reshape(-1, *b.shape[-3:]).movedim(-1, 1)
    g = torch.exp(-((torch.arange(window, dtype=x.dtype) - (window - 1) / 2) ** 2) / (2 * sigma**2))
    g = g / g.sum()
    kernel = (g[:, None] * g[None, :]).expand(x.shape[1], 1, window, window)

    def blur(t):
        return F.conv2d(t, kernel, groups=x.shape[1])

    c1, c2 = 0.01**2, 0.03**2
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx**2
    syy = blur(y * y) - my**2
    sxy = blur(x * y) - mx * my
    s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx**2 + my**2 + c1) * (sxx + syy + c2))
    return s.mean()


def rgb_loss(pred: torch.Tensor, target: torch.Tensor, lambda_l1: float = 1.0, lambda_perc: float = 1.0,
             lambda_l2: float = 0.0, lambda_ssim: float = 0.0) -> torch.Tensor:
    """Weighted mean-L1 + perceptual reconstruction loss; optional MSE and (1 - SSIM) terms."""
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    loss = lambda_l1 * (pred - target).abs().mean()
    if lambda_perc:
        loss = loss + lambda_perc * perceptual_proxy(pred, target)
    if lambda_l2:
        loss = loss + lambda_l2 * ((pred - target) ** 2).mean()
    if lambda_ssim:
        loss = loss + lambda_ssim * (1 - ssim(pred, target))
    return loss
