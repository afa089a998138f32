"""Frozen teacher stub and the cosine + L1 token distillation loss."""

from __future__ import annotations

import logging
import math

import numpy as np
import torch

from .encoder import Encoder, EncoderConfig, TokenGrid
from .errors import ValidationError

log = logging.getLogger(__name__)

TEACHER_SEED = 20250815


class TeacherStub(torch.nn.Module):
    """Randomly initialized encoder with the student's token geometry, frozen at construction."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig(), seed: int = TEACHER_SEED):
        super().__init__()
        self.seed = seed
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.net = Encoder(cfg)
        self.net.requires_grad_(False)
        self.net.eval()

    def train(self, mode: bool = True):
        return super().train(False)

    @torch.no_grad()
    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.net(image)


def subset_seed(run_seed: int, step: int, item: int) -> int:
    """Per-image sampling seed for a training step."""
    return int(np.random.SeedSequence([run_seed, step, item]).generate_state(1)[0])


def sample_token_subset(n_tokens: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted unique indices of ``ceil(fraction * n_tokens)`` tokens."""
    if not 0 < fraction <= 1:
        raise ValidationError(f"fraction must be in (0, 1], got {fraction}")
    k = math.ceil(fraction * n_tokens)
    rng = np.random.default_rng(seed)
    return np.sort(rng.permutation(n_tokens)[:k])


def _flat(z) -> torch.Tensor:
    return z.flat() if isinstance(z, TokenGrid) else z


def kd_loss(z, z_teacher, subset, alpha: float = 0.9, beta: float = 0.1) -> torch.Tensor:
    """``alpha * (1 - mean cos) + beta * mean L1`` over a token subset.

    ``z``/``z_teacher`` are TokenGrids or ``(..., N, d)`` token sequences. ``subset``
    indexes the token axis; a 2-D ``(B, k)`` subset selects different tokens per image.
    L1 is the mean absolute difference over the feature dimension. Tokens with zero
    norm count as orthogonal (cosine 0).
    """
    z, z_teacher = _flat(z), _flat(z_teacher)
    if z.shape != z_teacher.shape:
        raise ValidationError(f"token geometry mismatch {tuple(z.shape)} vs {tuple(z_teacher.shape)}")
    idx = torch.as_tensor(np.asarray(subset), dtype=torch.long)
    if idx.numel() == 0:
        raise ValidationError("empty token subset")
    if idx.dim() == 1:
        a = z.index_select(-2, idx)
        b = z_teacher.index_select(-2, idx)
    else:
        gather = idx[..., None].expand(*idx.shape, z.shape[-1])
        a = torch.gather(z, -2, gather)
        b = torch.gather(z_teacher, -2, gather)
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    degenerate = (na == 0) | (nb == 0)
    if bool(degenerate.any()):
        log.warning("kd_loss: %d zero-norm token(s) treated as orthogonal", int(degenerate.sum()))
    denom = torch.where(degenerate, torch.ones_like(na), na * nb)
    cos = torch.where(degenerate, torch.zeros_like(na), (a * b).sum(-1) / denom)
    l1 = (a - b).abs().mean(-1)
    return alpha * (1 - cos.mean()) + beta * l1.mean()
