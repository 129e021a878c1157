"""fusefield: uncertainty-aware neural feature fields fused from RGB-D frames.

Incrementally fuses posed RGB-D observations into a feature/TSDF voxel
volume with per-voxel uncertainty indicators, refines it with a small 3D
CNN, and decodes visual, semantic, and geometric predictions — each with
a learned heteroscedastic uncertainty — through differentiable volume
rendering.  Hot loops run through numba when available; set
``FUSEFIELD_BACKEND=numpy`` to force the pure-numpy fallback.
"""

__version__ = "0.1.0"

from .accel import backend, set_backend
from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    FuseFieldError,
    OutOfBoundsError,
)
from .geometry import (
    CameraIntrinsics,
    GridSpec,
    Pose,
    Ray,
    look_at,
    pixel_to_ray,
    project_point,
    ray_voxel_traversal,
    trilinear,
    world_to_voxel,
)
from .volume import VoxelVolume

__all__ = [
    "__version__",
    "backend",
    "set_backend",
    "FuseFieldError",
    "DomainError",
    "OutOfBoundsError",
    "FormatError",
    "ConfigError",
    "CameraIntrinsics",
    "Pose",
    "Ray",
    "GridSpec",
    "VoxelVolume",
    "pixel_to_ray",
    "project_point",
    "world_to_voxel",
    "trilinear",
    "ray_voxel_traversal",
    "look_at",
]
