"""On-disk layout of a ScenePair directory.

    meta.json          seed, intrinsics, row-major 4x4 world->camera poses, box list
    image_{i,j}.ppm    binary P6, 8-bit
    pointmap_{ii,ji}.f32   little-endian row-major float32, H x W x 3
    mask_{i,j}.u8      H x W bytes (0/1)
    corr.f32           N x 4 little-endian float32 (x_i, y_i, x_j, y_j)
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import Intrinsics, Pose, ScenePair

F32 = np.dtype("<f4")


def write_ppm(path, image: np.ndarray) -> None:
    data = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = data.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(x) for x in fields[1:])
    pos += 1
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def write_f32(path, array: np.ndarray) -> None:
    np.ascontiguousarray(array, dtype=F32).tofile(path)


def read_f32(path, shape) -> np.ndarray:
    return np.fromfile(path, dtype=F32).reshape(shape)


def save_scene_pair(pair: ScenePair, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    intr = pair.intrinsics
    meta = {
        "seed": pair.seed,
        "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                       "width": intr.width, "height": intr.height},
        "pose_i": pair.pose_i.matrix().ravel().tolist(),
        "pose_j": pair.pose_j.matrix().ravel().tolist(),
        "n_correspondences": int(len(pair.correspondences)),
        "boxes": pair.boxes,
    }
    (d / "meta.json").write_text(json.dumps(meta, indent=2))
    write_ppm(d / "image_i.ppm", pair.image_i)
    write_ppm(d / "image_j.ppm", pair.image_j)
    write_f32(d / "pointmap_ii.f32", pair.gt_pointmap_ii)
    write_f32(d / "pointmap_ji.f32", pair.gt_pointmap_ji)
    np.ascontiguousarray(pair.valid_mask_i, dtype=np.uint8).tofile(d / "mask_i.u8")
    np.ascontiguousarray(pair.valid_mask_j, dtype=np.uint8).tofile(d / "mask_j.u8")
    write_f32(d / "corr.f32", pair.correspondences.reshape(-1, 4))
    return d


def load_scene_pair(directory) -> ScenePair:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    intr = Intrinsics(**meta["intrinsics"])
    h, w = intr.height, intr.width
    return ScenePair(
        image_i=read_ppm(d / "image_i.ppm"),
        image_j=read_ppm(d / "image_j.ppm"),
        intrinsics=intr,
        pose_i=Pose.from_matrix(meta["pose_i"]),
        pose_j=Pose.from_matrix(meta["pose_j"]),
        gt_pointmap_ii=read_f32(d / "pointmap_ii.f32", (h, w, 3)).astype(np.float64),
        gt_pointmap_ji=read_f32(d / "pointmap_ji.f32", (h, w, 3)).astype(np.float64),
        valid_mask_i=np.fromfile(d / "mask_i.u8", dtype=np.uint8).reshape(h, w).astype(bool),
        valid_mask_j=np.fromfile(d / "mask_j.u8", dtype=np.uint8).reshape(h, w).astype(bool),
        correspondences=read_f32(d / "corr.f32", (meta["n_correspondences"], 4)).astype(np.float64),
        seed=int(meta["seed"]),
        boxes=meta.get("boxes", []),
    )


def scene_dirs(root) -> list[Path]:
    """Scene subdirectories of a dataset root, in sorted order."""
    return sorted(p.parent for p in Path(root).glob("*/meta.json"))
