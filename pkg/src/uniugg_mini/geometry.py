"""Pinhole cameras, rigid poses, Plücker raymaps and a procedural two-view scene generator.

Conventions:
    * Poses are world->camera: ``x_cam = R @ x_world + t``.
    * Camera axes follow OpenCV: x right, y down, z forward.
    * Pixel ``(x, y)`` has its center at integer coordinates ``(x, y)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import GenerationError, ValidationError

ORTHO_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValidationError("image size must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point outside the image")

    @classmethod
    def centered(cls, width: int, height: int, focal: float) -> "Intrinsics":
        return cls(focal, focal, (width - 1) / 2, (height - 1) / 2, width, height)

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def project(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points (..., 3) -> pixel coordinates (..., 2)."""
        z = points[..., 2]
        u = self.fx * points[..., 0] / z + self.cx
        v = self.fy * points[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def rays(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Camera-frame ray directions with unit z component (so ray parameter == depth)."""
        x = (np.asarray(u, dtype=np.float64) - self.cx) / self.fx
        y = (np.asarray(v, dtype=np.float64) - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValidationError(f"rotation must be 3x3, got {r.shape}")
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValidationError("pose contains non-finite values")
        if np.abs(r.T @ r - np.eye(3)).max() > ORTHO_TOL or abs(np.linalg.det(r) - 1) > ORTHO_TOL:
            raise ValidationError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_axis_angle(cls, rotvec, translation) -> "Pose":
        return cls(Rotation.from_rotvec(np.asarray(rotvec, dtype=np.float64)).as_matrix(), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @property
    def center(self) -> np.ndarray:
        """Camera center in the source frame."""
        return -self.rotation.T @ self.translation


def relative_pose(pose_i: Pose, pose_j: Pose) -> Pose:
    """Transform mapping camera-i coordinates to camera-j coordinates."""
    return pose_j.compose(pose_i.inverse())


def cell_centers(intrinsics: Intrinsics, grid_h: int, grid_w: int) -> tuple[np.ndarray, np.ndarray]:
    """Pixel coordinates of the centers of a ``grid_h x grid_w`` patch grid."""
    sx = intrinsics.width / grid_w
    sy = intrinsics.height / grid_h
    u = (np.arange(grid_w) + 0.5) * sx - 0.5
    v = (np.arange(grid_h) + 0.5) * sy - 0.5
    return np.meshgrid(u, v, indexing="xy")


def plucker_raymap(intrinsics: Intrinsics, rel: Pose, grid_h: int, grid_w: int) -> np.ndarray:
    """Plücker raymap ``(grid_h, grid_w, 6)`` = (unit direction, moment) per token cell.

    ``rel`` is the target camera's camera->reference transform: the ray origin is
    ``rel.translation`` (the target camera center in the reference frame) and
    directions are rotated by ``rel.rotation``. Pass ``relative_pose(i, j).inverse()``
    to encode view ``j`` relative to view ``i``.
    """
    if grid_h < 1 or grid_w < 1:
        raise ValidationError("grid dimensions must be >= 1")
    if not (intrinsics.fx > 0 and intrinsics.fy > 0):
        raise ValidationError("degenerate intrinsics")
    u, v = cell_centers(intrinsics, grid_h, grid_w)
    d = intrinsics.rays(u, v) @ rel.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(rel.translation, d.shape)
    m = np.cross(o, d)
    return np.concatenate([d, m], axis=-1)


def pointmap_to_depth(pointmap: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """z-channel of a camera-frame pointmap; masked-out cells become NaN."""
    depth = np.array(pointmap[..., 2], dtype=np.float64)
    if mask is not None:
        depth[~np.asarray(mask, dtype=bool)] = np.nan
    return depth


# ---------------------------------------------------------------------------
# procedural scenes


@dataclass(frozen=True)
class Primitive:
    """Axis-aligned textured plane (``kind='plane'``) or box (``kind='box'``).

    A plane is a box whose extent along its normal axis is zero; ``lo``/``hi``
    bound the finite rectangle (use +/-inf for unbounded sides).
    """

    kind: str
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    checker: float = 0.5

    def intersect(self, origin: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Ray parameters of the first hit (inf where missed) and the hit-face axis."""
        lo = np.asarray(self.lo)
        hi = np.asarray(self.hi)
        n = dirs.shape[0]
        if self.kind == "plane":
            axis = int(np.argmin(hi - lo))
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (lo[axis] - origin[axis]) / dirs[:, axis]
            p = origin + t[:, None] * dirs
            inside = np.ones(n, dtype=bool)
            for k in range(3):
                if k != axis:
                    inside &= (p[:, k] >= lo[k]) & (p[:, k] <= hi[k])
            t = np.where(inside & (t > 1e-9) & np.isfinite(t), t, np.inf)
            return t, np.full(n, axis)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dirs
            t0 = (lo - origin) * inv
            t1 = (hi - origin) * inv
        tnear = np.minimum(t0, t1)
        tfar = np.maximum(t0, t1)
        tnear = np.where(np.isnan(tnear), -np.inf, tnear)
        tfar = np.where(np.isnan(tfar), np.inf, tfar)
        tmin = tnear.max(axis=1)
        tmax = tfar.min(axis=1)
        axis = tnear.argmax(axis=1)
        hit = (tmax >= tmin) & (tmin > 1e-9)
        return np.where(hit, tmin, np.inf), axis

    def shade(self, points: np.ndarray, axis: np.ndarray) -> np.ndarray:
        s = self.checker
        a_idx = (axis + 1) % 3
        b_idx = (axis + 2) % 3
        rows = np.arange(points.shape[0])
        pa = points[rows, a_idx]
        pb = points[rows, b_idx]
        parity = (np.floor(pa / s) + np.floor(pb / s)) % 2
        ca = np.asarray(self.color_a)
        cb = np.asarray(self.color_b)
        color = np.where(parity[:, None] > 0, ca, cb)
        # vertical gradient and per-face shading keep neighbouring faces distinguishable
        grad = 0.85 + 0.15 * np.tanh(points[:, 1])
        face = np.array([0.8, 1.0, 0.9])[axis]
        return np.clip(color * (grad * face)[:, None], 0.0, 1.0)


@dataclass(frozen=True)
class SceneConfig:
    width: int = 64
    height: int = 64
    focal: float = 64.0
    n_boxes: int = 3
    baseline_min: float = 0.3
    baseline_max: float = 0.8
    wall_depth: float = 6.0
    wall_half_extent: float = 3.0
    floor: bool = True
    floor_height: float = 1.2
    reference_jitter: bool = True
    min_overlap: float = 0.3
    min_correspondences: int = 64
    max_retries: int = 100

    def __post_init__(self):
        if self.width < 1 or self.height < 1 or self.focal <= 0:
            raise ValidationError("invalid image geometry")
        if not 0 <= self.baseline_min <= self.baseline_max:
            raise ValidationError("invalid baseline range")
        if self.n_boxes < 0:
            raise ValidationError("n_boxes must be >= 0")


@dataclass
class ScenePair:
    image_i: np.ndarray
    image_j: np.ndarray
    intrinsics: Intrinsics
    pose_i: Pose
    pose_j: Pose
    gt_pointmap_ii: np.ndarray
    gt_pointmap_ji: np.ndarray
    valid_mask_i: np.ndarray
    valid_mask_j: np.ndarray
    correspondences: np.ndarray  # (N, 4): x_i, y_i, x_j, y_j in pixels
    seed: int
    boxes: list[dict] = field(default_factory=list)

    @property
    def rel(self) -> Pose:
        return relative_pose(self.pose_i, self.pose_j)

    def swapped(self) -> "ScenePair":
        """The same pair with the roles of the two views exchanged."""
        rel = self.rel
        return replace(
            self,
            image_i=self.image_j,
            image_j=self.image_i,
            pose_i=self.pose_j,
            pose_j=self.pose_i,
            gt_pointmap_ii=np.where(self.valid_mask_j[..., None], rel.apply(self.gt_pointmap_ji), 0.0),
            gt_pointmap_ji=np.where(self.valid_mask_i[..., None], rel.apply(self.gt_pointmap_ii), 0.0),
            valid_mask_i=self.valid_mask_j,
            valid_mask_j=self.valid_mask_i,
            correspondences=self.correspondences[:, [2, 3, 0, 1]],
        )


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, -1.0, 0.0)) -> Pose:
    """World->camera pose for a camera at ``center`` looking at ``target`` (y down)."""
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(-np.asarray(up, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    # re-orthonormalize to machine precision
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    return Pose(r, -r @ center)


def _random_color(rng: np.random.Generator) -> tuple[float, float, float]:
    return tuple(float(c) for c in rng.uniform(0.15, 0.95, size=3))


def build_primitives(rng: np.random.Generator, cfg: SceneConfig) -> list[Primitive]:
    e = cfg.wall_half_extent
    prims = [
        Primitive("plane", (-e, -e, cfg.wall_depth), (e, e, cfg.wall_depth),
                  _random_color(rng), _random_color(rng), float(rng.uniform(0.4, 0.9)))
    ]
    if cfg.floor:
        prims.append(Primitive("plane", (-e, cfg.floor_height, 0.0), (e, cfg.floor_height, cfg.wall_depth),
                               _random_color(rng), _random_color(rng), float(rng.uniform(0.3, 0.6))))
    for _ in range(cfg.n_boxes):
        size = rng.uniform(0.4, 1.0, size=3)
        cx = rng.uniform(-1.4, 1.4)
        cz = rng.uniform(2.8, cfg.wall_depth - 0.8)
        bottom = cfg.floor_height if cfg.floor else rng.uniform(0.3, 1.0)
        lo = (cx - size[0] / 2, bottom - size[1], cz - size[2] / 2)
        hi = (cx + size[0] / 2, bottom, cz + size[2] / 2)
        prims.append(Primitive("box", tuple(map(float, lo)), tuple(map(float, hi)),
                               _random_color(rng), _random_color(rng), float(rng.uniform(0.15, 0.35))))
    return prims


def cast_rays(prims: list[Primitive], origin: np.ndarray, dirs: np.ndarray):
    """Z-buffered ray casting: (t, primitive index, face axis); t=inf where nothing is hit."""
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_idx = np.full(n, -1)
    best_axis = np.zeros(n, dtype=int)
    for k, prim in enumerate(prims):
        t, axis = prim.intersect(origin, dirs)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        best_idx = np.where(closer, k, best_idx)
        best_axis = np.where(closer, axis, best_axis)
    return best_t, best_idx, best_axis


def render_view(prims: list[Primitive], intrinsics: Intrinsics, pose: Pose, u=None, v=None):
    """Render a view; returns (image, camera-frame pointmap, valid mask, world points).

    With ``u``/``v`` given, renders only those (possibly sub-pixel) locations.
    """
    if u is None:
        u, v = np.meshgrid(np.arange(intrinsics.width, dtype=np.float64),
                           np.arange(intrinsics.height, dtype=np.float64), indexing="xy")
    shape = np.shape(u)
    d_cam = intrinsics.rays(np.ravel(u), np.ravel(v))
    d_world = d_cam @ pose.rotation  # R^T d for each row
    origin = pose.center
    t, idx, axis = cast_rays(prims, origin, d_world)
    valid = np.isfinite(t)
    ts = np.where(valid, t, 0.0)
    world = origin + ts[:, None] * d_world
    # ray parameter equals depth because d_cam has unit z
    cam_pts = ts[:, None] * d_cam
    image = np.zeros((d_cam.shape[0], 3))
    for k, prim in enumerate(prims):
        sel = idx == k
        if sel.any():
            image[sel] = prim.shade(world[sel], axis[sel])
    return (image.reshape(*shape, 3), cam_pts.reshape(*shape, 3), valid.reshape(shape),
            world.reshape(*shape, 3))


def _quantize(image: np.ndarray) -> np.ndarray:
    # images are stored as 8-bit, keep the in-memory copy identical to what round-trips
    return np.round(image * 255.0) / 255.0


def _find_correspondences(prims, intr, pose_i, pose_j, world_i, valid_i):
    ys, xs = np.nonzero(valid_i)
    pts_j = pose_j.apply(world_i[ys, xs])
    in_front = pts_j[:, 2] > 1e-6
    uv = intr.project(np.where(in_front[:, None], pts_j, 1.0))
    inb = in_front & (uv[:, 0] >= 0) & (uv[:, 0] <= intr.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= intr.height - 1)
    ys, xs, uv, pts_j = ys[inb], xs[inb], uv[inb], pts_j[inb]
    if len(xs) == 0:
        return np.zeros((0, 4))
    _, _, hit, world_j = render_view(prims, intr, pose_j, uv[:, 0], uv[:, 1])
    err = np.linalg.norm(world_j - world_i[ys, xs], axis=-1)
    visible = hit & (err < 1e-6 * max(1.0, float(np.abs(world_i).max())))
    return np.stack([xs[visible], ys[visible], uv[visible, 0], uv[visible, 1]], axis=1).astype(np.float64)


def generate_scene_pair(seed: int, config: SceneConfig | None = None) -> ScenePair:
    """Deterministic two-view scene with exact pointmaps and correspondences."""
    cfg = config or SceneConfig()
    rng = np.random.default_rng(seed)
    intr = Intrinsics.centered(cfg.width, cfg.height, cfg.focal)
    prims = build_primitives(rng, cfg)
    target = np.array([0.0, 0.2, 0.5 * (2.8 + cfg.wall_depth)])

    if cfg.reference_jitter:
        c_i = rng.uniform([-0.3, -0.3, -0.3], [0.3, 0.1, 0.3])
        pose_i = look_at(c_i, target + rng.normal(0, 0.15, size=3))
    else:
        pose_i = Pose.identity()
    img_i, pm_ii, valid_i, world_i = render_view(prims, intr, pose_i)
    if valid_i.sum() == 0:
        raise GenerationError(f"reference view of seed {seed} sees no surface")

    for _ in range(cfg.max_retries):
        direction = rng.normal(size=3) * np.array([1.0, 0.4, 0.3])
        direction /= np.linalg.norm(direction)
        baseline = rng.uniform(cfg.baseline_min, cfg.baseline_max)
        c_j = pose_i.center + baseline * direction
        if baseline == 0:
            pose_j = pose_i
        else:
            pose_j = look_at(c_j, target + rng.normal(0, 0.2, size=3))
        corr = _find_correspondences(prims, intr, pose_i, pose_j, world_i, valid_i)
        overlap = len(corr) / valid_i.sum()
        if overlap >= cfg.min_overlap and len(corr) >= cfg.min_correspondences:
            break
    else:
        raise GenerationError(f"seed {seed}: overlap below {cfg.min_overlap} after {cfg.max_retries} retries")

    img_j, pm_jj, valid_j, _ = render_view(prims, intr, pose_j)
    rel = relative_pose(pose_i, pose_j)
    pm_ji = np.where(valid_j[..., None], rel.inverse().apply(pm_jj), 0.0)
    boxes = [
        {"lo": list(p.lo), "hi": list(p.hi)} for p in prims if p.kind == "box"
    ]
    return ScenePair(
        image_i=_quantize(img_i),
        image_j=_quantize(img_j),
        intrinsics=intr,
        pose_i=pose_i,
        pose_j=pose_j,
        gt_pointmap_ii=pm_ii,
        gt_pointmap_ji=pm_ji,
        valid_mask_i=valid_i,
        valid_mask_j=valid_j,
        correspondences=corr,
        seed=int(seed),
        boxes=boxes,
    )


def reprojection_residual(pair: ScenePair) -> tuple[float, float]:
    """Max pixel residual of (view i's own pointmap, view j's pointmap moved into camera j)."""
    intr = pair.intrinsics
    h, w = pair.valid_mask_i.shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    grid = np.stack([u, v], axis=-1)
    uv_i = intr.project(np.where(pair.valid_mask_i[..., None], pair.gt_pointmap_ii, 1.0))
    res_i = np.linalg.norm(uv_i - grid, axis=-1)[pair.valid_mask_i]
    pts_j = pair.rel.apply(pair.gt_pointmap_ji)
    uv_j = intr.project(np.where(pair.valid_mask_j[..., None], pts_j, 1.0))
    res_j = np.linalg.norm(uv_j - grid, axis=-1)[pair.valid_mask_j]
    return float(res_i.max(initial=0.0)), float(res_j.max(initial=0.0))


def camera_offset_in_reference(pair: ScenePair) -> np.ndarray:
    """Center of camera j expressed in camera-i coordinates."""
    return pair.rel.inverse().translation


__all__ = [
    "Intrinsics", "Pose", "ScenePair", "SceneConfig", "Primitive", "relative_pose", "plucker_raymap",
    "pointmap_to_depth", "generate_scene_pair", "render_view", "reprojection_residual", "cell_centers",
    "look_at", "camera_offset_in_reference",
]
