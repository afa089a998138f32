"""Dataset assembly: seeded scene pairs, token-level correspondences and tensor batches."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import torch

from .geometry import SceneConfig, ScenePair, generate_scene_pair
from .scene_io import load_scene_pair, scene_dirs

THREADS_ENV = "UNIUGG_MINI_THREADS"


def data_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def generate_pairs(seeds, config: SceneConfig | None = None) -> list[ScenePair]:
    seeds = list(seeds)
    n = min(data_threads(), max(1, len(seeds)))
    if n == 1:
        return [generate_scene_pair(s, config) for s in seeds]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(lambda s: generate_scene_pair(s, config), seeds))


def load_pairs(root) -> list[ScenePair]:
    return [load_scene_pair(d) for d in scene_dirs(root)]


def token_correspondences(corr: np.ndarray, patch_size: int, grid_h: int, grid_w: int) -> np.ndarray:
    """Collapse pixel correspondences to one-to-one token-cell pairs ``(x_i, y_i, x_j, y_j)``.

    Each reference cell keeps its most frequent target cell; a target cell claimed by
    several reference cells keeps the best-supported one.
    """
    if len(corr) == 0:
        return np.zeros((0, 4), dtype=np.int64)
    xi = np.clip(np.floor((corr[:, 0] + 0.5) / patch_size), 0, grid_w - 1).astype(np.int64)
    yi = np.clip(np.floor((corr[:, 1] + 0.5) / patch_size), 0, grid_h - 1).astype(np.int64)
    xj = np.clip(np.floor((corr[:, 2] + 0.5) / patch_size), 0, grid_w - 1).astype(np.int64)
    yj = np.clip(np.floor((corr[:, 3] + 0.5) / patch_size), 0, grid_h - 1).astype(np.int64)
    ci = yi * grid_w + xi
    cj = yj * grid_w + xj
    n = grid_h * grid_w
    pair_ids, counts = np.unique(ci * n + cj, return_counts=True)
    src, dst = pair_ids // n, pair_ids % n
    # highest count first, ties broken by id for determinism
    order = np.lexsort((pair_ids, -counts))
    used_src, used_dst, keep = set(), set(), []
    for k in order:
        if src[k] in used_src or dst[k] in used_dst:
            continue
        used_src.add(src[k])
        used_dst.add(dst[k])
        keep.append(k)
    keep = np.sort(np.asarray(keep, dtype=np.int64))
    s, d = src[keep], dst[keep]
    return np.stack([s % grid_w, s // grid_w, d % grid_w, d // grid_w], axis=1)


@dataclass
class PairBatch:
    image_i: torch.Tensor  # (B, H, W, 3)
    image_j: torch.Tensor
    gt_ii: torch.Tensor  # (B, H, W, 3)
    gt_ji: torch.Tensor
    mask_i: torch.Tensor  # (B, H, W) bool
    mask_j: torch.Tensor
    token_corr: list[torch.Tensor]  # per item (K, 4) long
    rel: np.ndarray  # (B, 4, 4) camera i -> camera j
    seeds: list[int]

    @classmethod
    def from_pairs(cls, pairs: list[ScenePair], patch_size: int, dtype=torch.float32) -> "PairBatch":
        def stack(attr):
            return torch.as_tensor(np.stack([getattr(p, attr) for p in pairs]), dtype=dtype)

        h, w = pairs[0].valid_mask_i.shape
        return cls(
            image_i=stack("image_i"),
            image_j=stack("image_j"),
            gt_ii=stack("gt_pointmap_ii"),
            gt_ji=stack("gt_pointmap_ji"),
            mask_i=torch.as_tensor(np.stack([p.valid_mask_i for p in pairs])),
            mask_j=torch.as_tensor(np.stack([p.valid_mask_j for p in pairs])),
            token_corr=[
                torch.as_tensor(token_correspondences(p.correspondences, patch_size, h // patch_size, w // patch_size))
                for p in pairs
            ],
            rel=np.stack([p.rel.matrix() for p in pairs]),
            seeds=[p.seed for p in pairs],
        )

    def __len__(self) -> int:
        return self.image_i.shape[0]

    def select(self, idx) -> "PairBatch":
        idx = list(idx)
        t = torch.as_tensor(idx, dtype=torch.long)
        return PairBatch(
            self.image_i[t], self.image_j[t], self.gt_ii[t], self.gt_ji[t], self.mask_i[t], self.mask_j[t],
            [self.token_corr[k] for k in idx], self.rel[idx], [self.seeds[k] for k in idx],
        )
