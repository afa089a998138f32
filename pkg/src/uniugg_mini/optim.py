"""Warmup + cosine learning-rate schedule and a functional AdamW step."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .errors import NumericError, ValidationError


def cosine_lr(step: int, total_steps: int, warmup_ratio: float, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` over ``warmup_ratio * total_steps``, then cosine decay to 0.

    Steps past ``total_steps`` are clamped to the final value.
    """
    if total_steps < 1:
        raise ValidationError("total_steps must be >= 1")
    if not 0 <= warmup_ratio < 1:
        raise ValidationError("warmup_ratio must be in [0, 1)")
    if step < 0:
        raise ValidationError("step must be >= 0")
    step = min(step, total_steps)
    warmup = warmup_ratio * total_steps
    if step < warmup:
        return base_lr * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamState:
    step: int = 0
    exp_avg: list[torch.Tensor] = field(default_factory=list)
    exp_avg_sq: list[torch.Tensor] = field(default_factory=list)


@torch.no_grad()
def optimizer_step(params: list[torch.Tensor], grads: list[torch.Tensor | None], state: AdamState, lr: float,
                   weight_decay: float = 0.0, betas: tuple[float, float] = (0.9, 0.999),
                   eps: float = 1e-8) -> AdamState:
    """One in-place AdamW update with decoupled weight decay and bias-corrected moments.

    A missing gradient is treated as zero. Non-finite gradients raise before any update.
    """
    if len(params) != len(grads):
        raise ValidationError("params and grads must align")
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValidationError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NumericError("non-finite gradient")
    if not state.exp_avg:
        state.exp_avg = [torch.zeros_like(p) for p in params]
        state.exp_avg_sq = [torch.zeros_like(p) for p in params]
    b1, b2 = betas
    state.step += 1
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        p.mul_(1 - lr * weight_decay)
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / c2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / c1)
    return state
