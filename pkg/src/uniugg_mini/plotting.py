"""Report figures written to PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_META = {"Software": None}


def plot_chamfer(report: dict, path) -> Path:
    """Per-scene Chamfer of generated vs random-latent target pointmaps."""
    scenes = report["scenes"]
    x = np.arange(len(scenes))
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar(x - 0.2, [s["gen_chamfer"] for s in scenes], 0.4, label="generated")
    ax.bar(x + 0.2, [s["baseline_chamfer"] for s in scenes], 0.4, label="random latent")
    ax.plot(x, [s["recon_chamfer"] for s in scenes], "k.", label="reconstruction")
    ax.set_xticks(x, [str(s["seed"]) for s in scenes])
    ax.set_xlabel("scene seed")
    ax.set_ylabel("Chamfer")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return Path(path)


def plot_depth_panel(depths: dict[str, np.ndarray], path, title: str = "") -> Path:
    """Side-by-side depth maps sharing one color range; NaN cells are left blank."""
    finite = np.concatenate([d[np.isfinite(d)] for d in depths.values()])
    lo, hi = (float(finite.min()), float(finite.max())) if finite.size else (0.0, 1.0)
    fig, axes = plt.subplots(1, len(depths), figsize=(2.6 * len(depths), 2.8))
    for ax, (name, d) in zip(np.atleast_1d(axes), depths.items()):
        im = ax.imshow(d, vmin=lo, vmax=hi, cmap="viridis")
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    fig.colorbar(im, ax=list(np.atleast_1d(axes)), shrink=0.8)
    if title:
        fig.suptitle(title, fontsize=10)
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return Path(path)


def plot_curves(logs: dict[str, list[dict]], path, keys=("total",)) -> Path:
    """Loss curves from metrics JSONL records, one line per (log, key)."""
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for name, records in logs.items():
        for k in keys:
            pts = [(r["step"], r[k]) for r in records if k in r]
            if pts:
                s, v = zip(*pts)
                ax.plot(s, v, label=f"{name}:{k}")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, metadata=_META)
    plt.close(fig)
    return Path(path)
