"""Procedural ground-truth scenes: analytic SDF solids, rendered RGB-D
frames, per-class synthetic teacher features, and ground-truth TSDF grids.

Scenes stand in for scanned environments: geometry is an exact signed
distance field (union of spheres, boxes, and planes), so depth, normals,
occupancy, and truncated distance values all have closed-form references
to validate against.  Teacher features replace a pretrained dense 2D
feature extractor with fixed seeded random unit vectors per object class,
preserving the distillation problem (dense targets, cosine querying)
without a network.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .accel import backend
from .errors import DomainError, FormatError
from .formats import FRAMES_MAGIC, load_arrays, save_arrays
from .geometry import CameraIntrinsics, GridSpec, Pose, look_at
from .kernels import tracing
from .volume import VoxelVolume

SHAPE_NAMES = {tracing.KIND_SPHERE: "sphere", tracing.KIND_BOX: "box", tracing.KIND_PLANE: "plane"}
_NAME_TO_KIND = {v: k for k, v in SHAPE_NAMES.items()}


@dataclass(frozen=True)
class ScenePrimitive:
    """One solid: a sphere, box, or halfspace ("plane") with albedo and class."""

    shape: str
    albedo: tuple
    class_id: int
    center: Optional[tuple] = None
    radius: Optional[float] = None
    half_extents: Optional[tuple] = None
    normal: Optional[tuple] = None
    offset: Optional[float] = None

    def __post_init__(self):
        if self.shape not in _NAME_TO_KIND:
            raise DomainError(f"unknown primitive shape {self.shape!r}")
        albedo = tuple(float(a) for a in self.albedo)
        if len(albedo) != 3 or any(a < 0 or a > 1 for a in albedo):
            raise DomainError("albedo must be three values in [0, 1]")
        object.__setattr__(self, "albedo", albedo)
        if self.class_id < 0 or int(self.class_id) != self.class_id:
            raise DomainError("class_id must be a non-negative integer")
        object.__setattr__(self, "class_id", int(self.class_id))
        if self.shape == "sphere":
            if self.center is None or self.radius is None or not self.radius > 0:
                raise DomainError("sphere needs a center and a positive radius")
            object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        elif self.shape == "box":
            if self.center is None or self.half_extents is None:
                raise DomainError("box needs a center and half_extents")
            half = tuple(float(h) for h in self.half_extents)
            if any(h <= 0 for h in half):
                raise DomainError("box half_extents must be positive")
            object.__setattr__(self, "center", tuple(float(c) for c in self.center))
            object.__setattr__(self, "half_extents", half)
        else:
            if self.normal is None or self.offset is None:
                raise DomainError("plane needs a normal and an offset")
            n = np.asarray(self.normal, dtype=np.float64)
            norm = np.linalg.norm(n)
            if norm < 1e-12:
                raise DomainError("plane normal must be nonzero")
            object.__setattr__(self, "normal", tuple(n / norm))
            object.__setattr__(self, "offset", float(self.offset))

    @staticmethod
    def sphere(center, radius, albedo, class_id) -> "ScenePrimitive":
        return ScenePrimitive("sphere", tuple(albedo), class_id, center=tuple(center), radius=float(radius))

    @staticmethod
    def box(center, half_extents, albedo, class_id) -> "ScenePrimitive":
        return ScenePrimitive("box", tuple(albedo), class_id, center=tuple(center), half_extents=tuple(half_extents))

    @staticmethod
    def plane(normal, offset, albedo, class_id) -> "ScenePrimitive":
        return ScenePrimitive("plane", tuple(albedo), class_id, normal=tuple(normal), offset=float(offset))


@dataclass(frozen=True)
class SyntheticScene:
    """A collection of SDF primitives plus lighting and teacher-feature setup."""

    primitives: tuple
    bounds_lo: tuple
    bounds_hi: tuple
    ambient: float = 0.3
    diffuse: float = 0.7
    light_dir: tuple = (0.37139068, 0.27854301, 0.88567784)
    feature_dim: int = 16
    feature_seed: int = 0

    def __post_init__(self):
        prims = tuple(self.primitives)
        if not prims:
            raise DomainError("scene needs at least one primitive")
        object.__setattr__(self, "primitives", prims)
        lo = tuple(float(v) for v in self.bounds_lo)
        hi = tuple(float(v) for v in self.bounds_hi)
        if len(lo) != 3 or len(hi) != 3 or any(a >= b for a, b in zip(lo, hi)):
            raise DomainError("bounds_lo must be strictly below bounds_hi")
        object.__setattr__(self, "bounds_lo", lo)
        object.__setattr__(self, "bounds_hi", hi)
        if not (0 <= self.ambient <= 1 and 0 <= self.diffuse <= 1):
            raise DomainError("lighting coefficients must lie in [0, 1]")
        l = np.asarray(self.light_dir, dtype=np.float64)
        n = np.linalg.norm(l)
        if n < 1e-12:
            raise DomainError("light_dir must be nonzero")
        object.__setattr__(self, "light_dir", tuple(l / n))
        if self.feature_dim < 2:
            raise DomainError("feature_dim must be at least 2")
        for p in prims:
            if p.shape == "sphere":
                c, r = np.array(p.center), p.radius
                if np.any(c - r <= lo) or np.any(c + r >= hi):
                    raise DomainError("sphere must lie strictly inside bounds")
            elif p.shape == "box":
                c, h = np.array(p.center), np.array(p.half_extents)
                if np.any(c - h <= lo) or np.any(c + h >= hi):
                    raise DomainError("box must lie strictly inside bounds")

    def encoded(self):
        """Flat (kinds, params, albedo, class_ids) arrays for the kernels."""
        n = len(self.primitives)
        kinds = np.empty(n, dtype=np.int64)
        params = np.zeros((n, 6))
        albedo = np.empty((n, 3))
        class_ids = np.empty(n, dtype=np.int64)
        for i, p in enumerate(self.primitives):
            kinds[i] = _NAME_TO_KIND[p.shape]
            albedo[i] = p.albedo
            class_ids[i] = p.class_id
            if p.shape == "sphere":
                params[i, 0:3] = p.center
                params[i, 3] = p.radius
            elif p.shape == "box":
                params[i, 0:3] = p.center
                params[i, 3:6] = p.half_extents
            else:
                params[i, 0:3] = p.normal
                params[i, 3] = p.offset
        return kinds, params, albedo, class_ids

    def class_ids(self) -> tuple:
        return tuple(sorted({p.class_id for p in self.primitives}))


@dataclass
class FrameObservation:
    """One synthetic RGB-D observation with dense teacher features."""

    rgb: np.ndarray
    depth: np.ndarray
    pose: Pose
    intr: CameraIntrinsics
    teacher_features: np.ndarray

    def __post_init__(self):
        self.rgb = np.ascontiguousarray(self.rgb, dtype=np.float64)
        self.depth = np.ascontiguousarray(self.depth, dtype=np.float64)
        self.teacher_features = np.ascontiguousarray(
            self.teacher_features, dtype=np.float64
        )
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3):
            raise DomainError("rgb must be (H, W, 3) matching depth")
        if (h, w) != (self.intr.height, self.intr.width):
            raise DomainError("depth size must match intrinsics")
        if self.teacher_features.ndim != 3 or self.teacher_features.shape[:2] != (h, w):
            raise DomainError("teacher_features must be (H, W, C)")
        if np.any(self.depth < 0):
            raise DomainError("depth must be non-negative")


def scene_sdf(scene: SyntheticScene, x):
    """Signed distance at ``x`` plus (class_id, albedo) of the nearest solid."""
    kinds, params, albedo, class_ids = scene.encoded()
    d, idx = tracing.sdf_batch(kinds, params, np.asarray(x, dtype=np.float64)[None, :])
    i = int(idx[0])
    return float(d[0]), int(class_ids[i]), np.array(albedo[i])


def scene_sdf_batch(scene: SyntheticScene, pts):
    """Vectorized signed distances and nearest-primitive indices for (N, 3) points."""
    kinds, params, _, _ = scene.encoded()
    return tracing.sdf_batch(kinds, params, np.asarray(pts, dtype=np.float64))


def teacher_feature(class_id: int, feature_dim: int, master_seed: int) -> np.ndarray:
    """Deterministic unit feature vector standing in for a teacher embedding."""
    if feature_dim < 2:
        raise DomainError("feature_dim must be at least 2")
    if class_id < 0:
        raise DomainError("class_id must be non-negative")
    seq = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(class_id),))
    rng = np.random.default_rng(seq)
    v = rng.standard_normal(int(feature_dim))
    return v / np.linalg.norm(v)


def _pixel_dirs(intr: CameraIntrinsics, pose: Pose):
    """World-space unit directions through every pixel center, plus 1/z factors."""
    u = (np.arange(intr.width) + 0.5 - intr.cx) / intr.fx
    v = (np.arange(intr.height) + 0.5 - intr.cy) / intr.fy
    uu, vv = np.meshgrid(u, v)  # (H, W)
    d_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    inv_norm = 1.0 / np.linalg.norm(d_cam, axis=-1)
    d_world = d_cam @ pose.rotation.T
    d_world *= inv_norm[..., None]
    return d_world.reshape(-1, 3), inv_norm.reshape(-1)


def render_frame(
    scene: SyntheticScene,
    pose: Pose,
    intr: CameraIntrinsics,
    seed: int = 0,
    depth_noise_std: float = 0.0,
) -> FrameObservation:
    """Render one RGB-D + teacher-feature observation by sphere tracing.

    Depth is pinhole z-depth (distance along the camera forward axis), not
    ray length; pixels that hit nothing carry depth 0, black color, and an
    all-zero teacher feature.  ``depth_noise_std`` > 0 adds seeded Gaussian
    noise to valid depths.
    """
    kinds, params, albedo, class_ids = scene.encoded()
    eye = pose.translation
    d0, _ = tracing.sdf_batch(kinds, params, eye[None, :])
    if d0[0] <= 0:
        raise DomainError("camera must start outside all solids")

    dirs, inv_norm = _pixel_dirs(intr, pose)
    center = 0.5 * (np.array(scene.bounds_lo) + np.array(scene.bounds_hi))
    diag = float(np.linalg.norm(np.array(scene.bounds_hi) - np.array(scene.bounds_lo)))
    t_max = float(np.linalg.norm(eye - center) + diag)

    if backend() == "numpy":
        t, idx, normals = tracing.trace_rays_numpy(kinds, params, eye, dirs, t_max)
    else:
        n = dirs.shape[0]
        t = np.empty(n)
        idx = np.empty(n, dtype=np.int64)
        normals = np.empty((n, 3))
        tracing.trace_rays(
            kinds, params, float(eye[0]), float(eye[1]), float(eye[2]),
            np.ascontiguousarray(dirs), t_max, t, idx, normals,
        )

    h, w = intr.height, intr.width
    hit = idx >= 0
    depth = np.where(hit, t * inv_norm, 0.0)

    shade = scene.ambient + scene.diffuse * np.maximum(
        0.0, normals @ np.asarray(scene.light_dir)
    )
    rgb = np.zeros((h * w, 3))
    rgb[hit] = albedo[idx[hit]] * shade[hit, None]
    np.clip(rgb, 0.0, 1.0, out=rgb)

    feats = np.zeros((h * w, scene.feature_dim))
    for cid in scene.class_ids():
        vec = teacher_feature(cid, scene.feature_dim, scene.feature_seed)
        mask = hit & (class_ids[idx] == cid)
        feats[mask] = vec

    if depth_noise_std > 0:
        rng = np.random.default_rng(seed)
        noise = rng.normal(0.0, depth_noise_std, size=depth.shape)
        depth = np.where(depth > 0, np.maximum(depth + noise, 1e-6), 0.0)

    return FrameObservation(
        rgb=rgb.reshape(h, w, 3),
        depth=depth.reshape(h, w),
        pose=pose,
        intr=intr,
        teacher_features=feats.reshape(h, w, scene.feature_dim),
    )


def ground_truth_tsdf(scene: SyntheticScene, grid: GridSpec, trunc: float) -> VoxelVolume:
    """Clamp the analytic SDF at voxel centers to [-1, 1] in truncation units."""
    if not trunc > 0:
        raise DomainError("trunc must be positive")
    centers = grid.voxel_centers().reshape(-1, 3)
    d, _ = scene_sdf_batch(scene, centers)
    tsdf = np.clip(d / trunc, -1.0, 1.0)
    return VoxelVolume(grid, tsdf.reshape(grid.dims + (1,)))


def orbit_poses(center, radius: float, height: float, count: int, start_angle: float = 0.0):
    """Poses on a horizontal circle, all looking at ``center``."""
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for i in range(count):
        a = start_angle + 2.0 * np.pi * i / count
        eye = center + np.array([radius * np.cos(a), radius * np.sin(a), height])
        poses.append(look_at(eye, center))
    return poses


# ---------------------------------------------------------------------------
# Scene description files (JSON).

_SCENE_KEYS = {
    "primitives", "bounds_lo", "bounds_hi", "ambient", "diffuse",
    "light_dir", "feature_dim", "feature_seed",
}
_PRIM_KEYS = {"shape", "albedo", "class_id", "center", "radius", "half_extents", "normal", "offset"}


def scene_to_dict(scene: SyntheticScene) -> dict:
    prims = []
    for p in scene.primitives:
        d = {"shape": p.shape, "albedo": list(p.albedo), "class_id": p.class_id}
        if p.shape == "sphere":
            d["center"] = list(p.center)
            d["radius"] = p.radius
        elif p.shape == "box":
            d["center"] = list(p.center)
            d["half_extents"] = list(p.half_extents)
        else:
            d["normal"] = list(p.normal)
            d["offset"] = p.offset
        prims.append(d)
    return {
        "primitives": prims,
        "bounds_lo": list(scene.bounds_lo),
        "bounds_hi": list(scene.bounds_hi),
        "ambient": scene.ambient,
        "diffuse": scene.diffuse,
        "light_dir": list(scene.light_dir),
        "feature_dim": scene.feature_dim,
        "feature_seed": scene.feature_seed,
    }


def scene_from_dict(doc: dict) -> SyntheticScene:
    if not isinstance(doc, dict):
        raise FormatError("scene document must be a JSON object")
    unknown = set(doc) - _SCENE_KEYS
    if unknown:
        raise FormatError(f"unknown scene keys: {sorted(unknown)}")
    if "primitives" not in doc or "bounds_lo" not in doc or "bounds_hi" not in doc:
        raise FormatError("scene needs primitives, bounds_lo, and bounds_hi")
    prims = []
    for entry in doc["primitives"]:
        if not isinstance(entry, dict):
            raise FormatError("each primitive must be a JSON object")
        unknown = set(entry) - _PRIM_KEYS
        if unknown:
            raise FormatError(f"unknown primitive keys: {sorted(unknown)}")
        try:
            prims.append(ScenePrimitive(**entry))
        except (TypeError, DomainError) as exc:
            raise FormatError(f"bad primitive entry: {exc}") from exc
    kwargs = {k: doc[k] for k in doc if k not in ("primitives",)}
    try:
        return SyntheticScene(primitives=tuple(prims), **kwargs)
    except (TypeError, DomainError) as exc:
        raise FormatError(f"bad scene document: {exc}") from exc


def save_scene(path, scene: SyntheticScene) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_scene(path) -> SyntheticScene:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid scene JSON: {exc}") from exc
    return scene_from_dict(doc)


def save_frames(path, frames) -> None:
    """Persist an observation sequence as one deterministic binary archive."""
    frames = list(frames)
    named = {"count": np.array([len(frames)], dtype=np.int64)}
    for i, frame in enumerate(frames):
        key = f"frame{i:05d}"
        intr = frame.intr
        named[f"{key}.rgb"] = frame.rgb
        named[f"{key}.depth"] = frame.depth
        named[f"{key}.features"] = frame.teacher_features
        named[f"{key}.rotation"] = frame.pose.rotation
        named[f"{key}.translation"] = frame.pose.translation
        named[f"{key}.intrinsics"] = np.array(
            [intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height]
        )
    save_arrays(path, FRAMES_MAGIC, named)


def load_frames(path) -> list:
    entries = load_arrays(path, FRAMES_MAGIC)
    if "count" not in entries:
        raise FormatError("frame archive has no count entry")
    frames = []
    for i in range(int(entries["count"][0])):
        key = f"frame{i:05d}"
        try:
            cal = entries[f"{key}.intrinsics"]
            frames.append(
                FrameObservation(
                    rgb=entries[f"{key}.rgb"],
                    depth=entries[f"{key}.depth"],
                    pose=Pose(entries[f"{key}.rotation"], entries[f"{key}.translation"]),
                    intr=CameraIntrinsics(
                        cal[0], cal[1], cal[2], cal[3], int(cal[4]), int(cal[5])
                    ),
                    teacher_features=entries[f"{key}.features"],
                )
            )
        except KeyError as exc:
            raise FormatError(f"frame archive is missing entry {exc}") from exc
        except DomainError as exc:
            raise FormatError(f"frame {i} is inconsistent: {exc}") from exc
    return frames


def preset_scene(name: str, feature_dim: int = 16, feature_seed: int = 0) -> SyntheticScene:
    """Built-in demo scenes used by the CLI and the test-suite."""
    if name == "sphere":
        prims = (
            ScenePrimitive.sphere((0.0, 0.0, 0.45), 0.3, (0.85, 0.3, 0.25), 1),
        )
    elif name == "sphere_floor":
        prims = (
            ScenePrimitive.plane((0.0, 0.0, 1.0), 0.0, (0.6, 0.6, 0.6), 0),
            ScenePrimitive.sphere((0.0, 0.0, 0.45), 0.3, (0.85, 0.3, 0.25), 1),
        )
    elif name == "tabletop":
        prims = (
            ScenePrimitive.plane((0.0, 0.0, 1.0), 0.0, (0.6, 0.6, 0.6), 0),
            ScenePrimitive.sphere((-0.35, 0.2, 0.3), 0.28, (0.85, 0.3, 0.25), 1),
            ScenePrimitive.box((0.45, -0.25, 0.22), (0.26, 0.26, 0.22), (0.25, 0.45, 0.85), 2),
        )
    else:
        raise DomainError(f"unknown preset scene {name!r}")
    return SyntheticScene(
        primitives=prims,
        bounds_lo=(-1.2, -1.2, -0.1),
        bounds_hi=(1.2, 1.2, 1.3),
        feature_dim=feature_dim,
        feature_seed=feature_seed,
    )
