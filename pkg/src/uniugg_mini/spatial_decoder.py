"""Projector, dual cross-attention decoder, spatial head and the two-view spatial loss."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import PairBatch
from .encoder import rgb_loss, unpatchify
from .errors import ValidationError
from .layers import Block


@dataclass(frozen=True)
class DecoderConfig:
    enc_dim: int = 128
    dim: int = 128
    depth: int = 2
    heads: int = 4
    descriptor_dim: int = 16
    patch_size: int = 8
    grid: int = 8
    shared_branches: bool = False

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError("decoder depth must be >= 1")
        if self.dim % self.heads:
            raise ValidationError("dim must be divisible by heads")


@dataclass
class SpatialPrediction:
    pointmap: torch.Tensor  # (B, H, W, 3)
    confidence: torch.Tensor  # (B, H, W), >= 1
    descriptors: torch.Tensor  # (B, H_t, W_t, d_f), unit norm, one per token cell

    def pixel_descriptors(self, patch_size: int) -> torch.Tensor:
        return self.descriptors.repeat_interleave(patch_size, -3).repeat_interleave(patch_size, -2)


class Projector(nn.Module):
    """Two-layer MLP with GELU between encoder tokens and the decoder width."""

    def __init__(self, in_dim: int, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, dim)
        self.fc2 = nn.Linear(dim, dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(z)))


class SpatialHead(nn.Module):
    def __init__(self, dim: int, patch_size: int, descriptor_dim: int):
        super().__init__()
        self.patch_size = patch_size
        self.norm = nn.LayerNorm(dim)
        self.pts = nn.Sequential(nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, 4 * patch_size * patch_size))
        self.desc = nn.Linear(dim, descriptor_dim)

    def forward(self, h: torch.Tensor, grid: tuple[int, int]) -> SpatialPrediction:
        b = h.shape[0]
        x = self.norm(h)
        out = self.pts(x).view(b, *grid, -1)
        dense = unpatchify(out, self.patch_size, channels=4)
        desc = F.normalize(self.desc(x), dim=-1).view(b, *grid, -1)
        return SpatialPrediction(dense[..., :3], 1 + torch.exp(dense[..., 3]), desc)


class SpatialDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig = DecoderConfig()):
        super().__init__()
        self.cfg = cfg
        n = cfg.grid * cfg.grid
        self.projector = Projector(cfg.enc_dim, cfg.dim)
        self.pos_embed = nn.Parameter(torch.randn(1, n, cfg.dim) * 0.02)
        self.blocks_i = nn.ModuleList(Block(cfg.dim, cfg.heads, cross=True) for _ in range(cfg.depth))
        self.norm_i = nn.LayerNorm(cfg.dim)
        self.head_i = SpatialHead(cfg.dim, cfg.patch_size, cfg.descriptor_dim)
        if cfg.shared_branches:
            self.blocks_j, self.norm_j, self.head_j = self.blocks_i, self.norm_i, self.head_i
        else:
            self.blocks_j = nn.ModuleList(Block(cfg.dim, cfg.heads, cross=True) for _ in range(cfg.depth))
            self.norm_j = nn.LayerNorm(cfg.dim)
            self.head_j = SpatialHead(cfg.dim, cfg.patch_size, cfg.descriptor_dim)

    def project_tokens(self, z: torch.Tensor) -> torch.Tensor:
        """(B, H_t, W_t, d_enc) -> (B, H_t, W_t, d_dec)."""
        return self.projector(z)

    def decode_pair(self, zp_i: torch.Tensor, zp_j: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Projected grids -> decoder token sequences (B, N, dim) for both views."""
        if zp_i.shape != zp_j.shape:
            raise ValidationError(f"grid mismatch {tuple(zp_i.shape)} vs {tuple(zp_j.shape)}")
        x_i = zp_i.flatten(1, 2) + self.pos_embed
        x_j = zp_j.flatten(1, 2) + self.pos_embed
        for blk_i, blk_j in zip(self.blocks_i, self.blocks_j):
            x_i, x_j = blk_i(x_i, context=x_j), blk_j(x_j, context=x_i)
        return self.norm_i(x_i), self.norm_j(x_j)

    def forward(self, z_i: torch.Tensor, z_j: torch.Tensor) -> tuple[SpatialPrediction, SpatialPrediction]:
        grid = tuple(z_i.shape[1:3])
        h_i, h_j = self.decode_pair(self.project_tokens(z_i), self.project_tokens(z_j))
        return self.head_i(h_i, grid), self.head_j(h_j, grid)


# ---------------------------------------------------------------------------
# losses


def mean_norm(points: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-item mean point norm over valid pixels: (B, H, W, 3), (B, H, W) -> (B,)."""
    m = mask.to(points.dtype)
    return (points.norm(dim=-1) * m).flatten(1).sum(1) / m.flatten(1).sum(1)


def conf_loss(points: torch.Tensor, conf: torch.Tensor, gt: torch.Tensor, mask: torch.Tensor,
              alpha_conf: float = 0.2, pred_scale=None, gt_scale=None) -> torch.Tensor:
    """Confidence-weighted scale-normalized regression ``mean(C * rho - alpha * log C)``.

    Accepts single views ``(H, W, ...)`` or batches ``(B, H, W, ...)``. Scales default to
    each item's own mean point norm over valid pixels; the loss is the mean over items of
    the mean over valid pixels.
    """
    if points.dim() == 3:
        points, conf, gt, mask = points[None], conf[None], gt[None], mask[None]
    mask = mask.bool()
    counts = mask.flatten(1).sum(1)
    if bool((counts == 0).any()):
        raise ValidationError("conf_loss needs a non-empty valid mask")
    s_pred = mean_norm(points, mask) if pred_scale is None else pred_scale
    s_gt = mean_norm(gt, mask) if gt_scale is None else gt_scale
    diff = points / s_pred.view(-1, 1, 1, 1) - gt / s_gt.view(-1, 1, 1, 1)
    # sqrt(x + 0) is not differentiable at 0; masked-out pixels are zeroed first
    m = mask.to(points.dtype)
    sq = (diff * diff).sum(-1)
    rho = torch.sqrt(torch.where(mask, sq, torch.ones_like(sq))) * m
    per_pixel = conf * rho - alpha_conf * torch.log(conf)
    return ((per_pixel * m).flatten(1).sum(1) / counts).mean()


def regression_residual(points, gt, mask) -> torch.Tensor:
    """Scale-normalized per-pixel residual ``rho`` (zero outside the mask)."""
    if points.dim() == 3:
        points, gt, mask = points[None], gt[None], mask[None]
    diff = points / mean_norm(points, mask).view(-1, 1, 1, 1) - gt / mean_norm(gt, mask).view(-1, 1, 1, 1)
    return diff.norm(dim=-1) * mask


def match_loss(desc_i: torch.Tensor, desc_j: torch.Tensor, corr, tau: float = 0.07) -> torch.Tensor:
    """Symmetric InfoNCE over ground-truth cell correspondences.

    ``desc_*`` are ``(h, w, f)`` grids (or ``(N, f)``); ``corr`` is ``(K, 4)`` of
    ``(x_i, y_i, x_j, y_j)`` grid coordinates (or ``(K, 2)`` flat indices). Candidates are
    all cells of the other view; the two directions are averaged.
    """
    corr = torch.as_tensor(corr, dtype=torch.long)
    if corr.numel() == 0:
        raise ValidationError("match_loss needs at least one correspondence")
    if desc_i.dim() == 3:
        w = desc_i.shape[1]
        desc_i, desc_j = desc_i.flatten(0, 1), desc_j.flatten(0, 1)
        if corr.shape[1] == 4:
            corr = torch.stack([corr[:, 1] * w + corr[:, 0], corr[:, 3] * w + corr[:, 2]], dim=1)
    p, q = corr[:, 0], corr[:, 1]
    logits_ij = desc_i[p] @ desc_j.T / tau
    logits_ji = desc_j[q] @ desc_i.T / tau
    return 0.5 * (F.cross_entropy(logits_ij, q) + F.cross_entropy(logits_ji, p))


def spatial_loss(pred_i: SpatialPrediction, pred_j: SpatialPrediction, batch: PairBatch,
                 lambda1: float = 1.0, lambda2: float = 1.0, alpha_conf: float = 0.2, tau: float = 0.07,
                 rgb_i: torch.Tensor | None = None, rgb_j: torch.Tensor | None = None,
                 lambda_l1: float = 1.0, lambda_perc: float = 1.0) -> dict[str, torch.Tensor]:
    """``conf + lambda1 * match + lambda2 * rgb`` with its components.

    Both views are normalized by a shared per-pair scale (mean norm over the valid
    pixels of both pointmaps); ``conf`` and ``rgb`` average the two views.
    """
    both_pred = torch.cat([pred_i.pointmap, pred_j.pointmap], dim=1)
    both_gt = torch.cat([batch.gt_ii, batch.gt_ji], dim=1)
    both_mask = torch.cat([batch.mask_i, batch.mask_j], dim=1)
    s_pred = mean_norm(both_pred, both_mask)
    s_gt = mean_norm(both_gt, both_mask)
    l_conf = 0.5 * (
        conf_loss(pred_i.pointmap, pred_i.confidence, batch.gt_ii, batch.mask_i, alpha_conf, s_pred, s_gt)
        + conf_loss(pred_j.pointmap, pred_j.confidence, batch.gt_ji, batch.mask_j, alpha_conf, s_pred, s_gt)
    )
    zero = l_conf.new_zeros(())
    l_match = zero
    if lambda1:
        l_match = torch.stack([
            match_loss(pred_i.descriptors[b], pred_j.descriptors[b], batch.token_corr[b], tau)
            for b in range(len(batch))
        ]).mean()
    l_rgb = zero
    if lambda2:
        if rgb_i is None or rgb_j is None:
            raise ValidationError("lambda2 > 0 requires RGB reconstructions of both views")
        l_rgb = 0.5 * (rgb_loss(rgb_i, batch.image_i, lambda_l1, lambda_perc)
                       + rgb_loss(rgb_j, batch.image_j, lambda_l1, lambda_perc))
    total = l_conf + lambda1 * l_match + lambda2 * l_rgb
    return {"conf": l_conf, "match": l_match, "rgb": l_rgb, "total": total}
