"""Pinhole cameras, rigid poses, rays, voxel-grid addressing, interpolation.

Conventions used throughout the package:

* Poses are camera-to-world.  Camera axes follow the computer-vision
  convention: x right, y down, z forward (viewing direction).
* Pixel coordinates (u, v) are continuous, with the center of the
  integer pixel (i, j) at (i + 0.5, j + 0.5).
* The center of voxel (i, j, k) sits at
  ``origin + (i + 0.5, j + 0.5, k + 0.5) * voxel_size``; interpolation
  operates on voxel centers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np

from .errors import DomainError, OutOfBoundsError
from .kernels import sampling, traversal

if TYPE_CHECKING:  # pragma: no cover
    from .volume import VoxelVolume

_ORTHO_TOL = 1e-9


def _vec3(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (3,):
        raise DomainError(f"{name} must be a 3-vector, got shape {v.shape}")
    return v


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics with focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError("principal point must lie inside the image")


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = _vec3(self.translation, "translation")
        if r.shape != (3, 3):
            raise DomainError(f"rotation must be 3x3, got shape {r.shape}")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
            raise DomainError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise DomainError("rotation determinant must be +1")
        r = r.copy()
        t = t.copy()
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def apply(self, pts: np.ndarray) -> np.ndarray:
        """Map camera-frame points to world coordinates."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse_apply(self, pts: np.ndarray) -> np.ndarray:
        """Map world points into the camera frame."""
        pts = np.asarray(pts, dtype=np.float64)
        return (pts - self.translation) @ self.rotation


@dataclass(frozen=True)
class Ray:
    """Ray with unit direction and a traced parameter interval [t_near, t_far]."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        o = _vec3(self.origin, "origin")
        d = _vec3(self.direction, "direction")
        if abs(np.linalg.norm(d) - 1.0) > _ORTHO_TOL:
            raise DomainError("ray direction must be unit length")
        if not (0 <= self.t_near < self.t_far):
            raise DomainError("require 0 <= t_near < t_far")
        o = o.copy()
        d = d.copy()
        o.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)

    def at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Axis-aligned voxel grid: corner origin, cubic voxel size, dimensions."""

    origin: np.ndarray
    voxel_size: float
    dims: tuple

    def __eq__(self, other):
        if not isinstance(other, GridSpec):
            return NotImplemented
        return (
            tuple(self.origin) == tuple(other.origin)
            and self.voxel_size == other.voxel_size
            and self.dims == other.dims
        )

    def __hash__(self):
        return hash((tuple(self.origin), self.voxel_size, self.dims))

    def __post_init__(self):
        o = _vec3(self.origin, "origin")
        o = o.copy()
        o.flags.writeable = False
        object.__setattr__(self, "origin", o)
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d < 1 for d in dims):
            raise DomainError(f"dims must be three positive integers, got {self.dims}")
        object.__setattr__(self, "dims", dims)
        if not self.voxel_size > 0:
            raise DomainError("voxel_size must be positive")

    def aabb(self) -> tuple:
        lo = self.origin
        hi = self.origin + np.asarray(self.dims, dtype=np.float64) * self.voxel_size
        return lo, hi

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of every voxel center, shape (X, Y, Z, 3)."""
        nx, ny, nz = self.dims
        ii, jj, kk = np.meshgrid(
            np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij"
        )
        idx = np.stack([ii, jj, kk], axis=-1).astype(np.float64)
        return self.origin + (idx + 0.5) * self.voxel_size


def pixel_to_ray(
    intr: CameraIntrinsics,
    pose: Pose,
    pixel,
    t_near: float = 0.0,
    t_far: float = np.inf,
) -> Ray:
    """Back-project a pixel to a world-space ray from the camera center."""
    u, v = float(pixel[0]), float(pixel[1])
    if not (0 <= u < intr.width and 0 <= v < intr.height):
        raise DomainError(f"pixel ({u}, {v}) outside image bounds")
    d_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    d_world = pose.rotation @ d_cam
    d_world = d_world / np.linalg.norm(d_world)
    return Ray(pose.translation, d_world, t_near, t_far)


def project_point(intr: CameraIntrinsics, pose: Pose, x) -> tuple:
    """Project a world point, returning (u, v, z) with z the camera depth.

    No bounds or positivity checks are applied; callers filter on z > 0 and
    on the pixel lying inside the image.
    """
    p = pose.inverse_apply(_vec3(x, "x"))
    z = p[2]
    u = intr.fx * p[0] / z + intr.cx
    v = intr.fy * p[1] / z + intr.cy
    return float(u), float(v), float(z)


def project_points(intr: CameraIntrinsics, pose: Pose, pts: np.ndarray):
    """Vectorized projection of (..., 3) world points to (u, v, z) arrays."""
    p = pose.inverse_apply(pts)
    z = p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * p[..., 0] / z + intr.cx
        v = intr.fy * p[..., 1] / z + intr.cy
    return u, v, z


def world_to_voxel(grid: GridSpec, x) -> np.ndarray:
    """Continuous voxel-corner coordinates (x − origin) / voxel_size."""
    x = np.asarray(x, dtype=np.float64)
    return (x - grid.origin) / grid.voxel_size


def world_to_center_coords(grid: GridSpec, x) -> np.ndarray:
    """Continuous voxel-center coordinates; integers land on voxel centers."""
    return world_to_voxel(grid, x) - 0.5


def trilinear(vol: "VoxelVolume", x) -> np.ndarray:
    """Trilinearly interpolate a volume at world point(s) ``x``.

    Accepts a single 3-vector (returns a (C,) vector) or an (N, 3) batch
    (returns (N, C)).  Points outside the interpolable region — center
    coordinates beyond [0, dims−1] — raise :class:`OutOfBoundsError`.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = world_to_center_coords(vol.grid, x.reshape(-1, 3))
    upper = np.asarray(vol.grid.dims, dtype=np.float64) - 1.0
    if np.any(pts < 0.0) or np.any(pts > upper):
        raise OutOfBoundsError("query outside the interpolable region")
    out = sampling.trilinear_forward(vol.data, pts)
    return out[0] if single else out


def ray_voxel_traversal(grid: GridSpec, ray: Ray) -> np.ndarray:
    """Ordered (N, 3) int64 indices of voxels crossed by the ray segment."""
    return traversal.traverse(
        ray.origin, ray.direction, ray.t_near, ray.t_far,
        grid.origin, grid.voxel_size, grid.dims,
    )


def clip_ray_to_grid(grid: GridSpec, ray: Ray) -> tuple:
    """Intersect [t_near, t_far] with the grid box; (enter, exit), enter >= exit means miss."""
    lo, hi = grid.aabb()
    return traversal.clip_segment_to_box(
        float(ray.origin[0]), float(ray.origin[1]), float(ray.origin[2]),
        float(ray.direction[0]), float(ray.direction[1]), float(ray.direction[2]),
        float(ray.t_near), float(ray.t_far),
        float(lo[0]), float(lo[1]), float(lo[2]),
        float(hi[0]), float(hi[1]), float(hi[2]),
    )


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Camera-to-world pose looking from ``eye`` toward ``target``.

    Uses the x-right / y-down / z-forward camera convention; ``up`` is the
    world up used to level the camera.  A fallback up axis is substituted
    when the view direction is (anti)parallel to ``up``.
    """
    eye = _vec3(eye, "eye")
    target = _vec3(target, "target")
    fwd = target - eye
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise DomainError("eye and target coincide")
    fwd = fwd / n
    up = _vec3(up, "up")
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    return Pose(rot, eye)
