"""Depth and point-cloud metrics plus ASCII PLY export."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError


@dataclass
class DepthReport:
    abs_rel: float
    delta_125: float
    n_valid: int
    scaling_mode: str

    def to_dict(self) -> dict:
        return asdict(self)


def depth_metrics(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None,
                  scaling: str = "none") -> DepthReport:
    """Abs Rel and the fraction of pixels with ``max(pred/gt, gt/pred) < 1.25``.

    ``scaling='per_frame_median'`` first multiplies ``pred`` by ``median(gt)/median(pred)``
    over the valid set (``mask`` & ``gt > 0`` & finite).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {gt.shape}")
    valid = np.isfinite(gt) & (gt > 0) & np.isfinite(pred)
    if mask is not None:
        valid &= np.asarray(mask, dtype=bool)
    if not valid.any():
        raise ValidationError("no valid pixels for depth metrics")
    p, g = pred[valid], gt[valid]
    if scaling == "per_frame_median":
        p = p * (np.median(g) / np.median(p))
    elif scaling != "none":
        raise ValidationError(f"unknown scaling mode {scaling!r}")
    abs_rel = float(np.mean(np.abs(p - g) / g))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.maximum(p / g, g / p)
    delta = float(np.mean(np.where(p > 0, ratio, np.inf) < 1.25))
    return DepthReport(abs_rel, delta, int(valid.sum()), scaling)


def _nn_dist(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = np.empty(len(a))
    for s in range(0, len(a), chunk):
        diff = a[s:s + chunk, None, :] - b[None, :, :]
        out[s:s + chunk] = np.sqrt((diff * diff).sum(-1).min(1))
    return out


def chamfer(pc_a: np.ndarray, pc_b: np.ndarray) -> float:
    """Symmetric Chamfer distance: mean of both directional mean nearest-neighbour distances."""
    a = np.asarray(pc_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(pc_b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValidationError("chamfer needs two non-empty point sets")
    return float(0.5 * (_nn_dist(a, b).mean() + _nn_dist(b, a).mean()))


def export_ply(pointmap: np.ndarray, colors: np.ndarray, confidence: np.ndarray | None,
               conf_threshold: float, path) -> Path:
    """Write points whose confidence reaches ``conf_threshold`` as ASCII PLY with uchar colors."""
    pts = np.asarray(pointmap, dtype=np.float64).reshape(-1, 3)
    cols = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(cols) != len(pts):
        raise ValidationError("pointmap and colors must have the same number of pixels")
    if confidence is None:
        keep = np.ones(len(pts), dtype=bool)
    else:
        conf = np.asarray(confidence, dtype=np.float64).reshape(-1)
        if len(conf) != len(pts):
            raise ValidationError("confidence must have one value per pixel")
        keep = conf >= conf_threshold
    keep &= np.isfinite(pts).all(1)
    pts = pts[keep]
    rgb = np.clip(np.round(cols[keep] * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    lines = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(pts)}",
        "property float x",
        "property float y",
        "property float z",
        "property uchar red",
        "property uchar green",
        "property uchar blue",
        "end_header",
    ]
    lines += [f"{x:.9g} {y:.9g} {z:.9g} {r} {g} {b}" for (x, y, z), (r, g, b) in zip(pts, rgb)]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Minimal reader for the ASCII files written by :func:`export_ply`."""
    text = Path(path).read_text().splitlines()
    n = 0
    for k, line in enumerate(text):
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line == "end_header":
            body = text[k + 1:k + 1 + n]
            break
    else:
        raise ValidationError(f"{path}: missing end_header")
    data = np.array([[float(v) for v in row.split()] for row in body]).reshape(n, 6)
    return data[:, :3], data[:, 3:].astype(np.uint8)
