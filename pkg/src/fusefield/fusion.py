"""Incremental RGB-D fusion into feature, TSDF, and uncertainty volumes.

Every observed frame contributes twice:

* its depth map updates a truncated signed-distance volume with the
  standard weighted running average (per-observation weight 1);
* its per-pixel image features (from a small 2D conv encoder) are pushed
  along each pixel's viewing ray and folded into per-voxel running mean /
  variance statistics (Welford updates), with an observation counter.

``assemble_input`` concatenates everything into the refinement network's
input volume: [feature mean | tsdf | normalized count | feature variance].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, conv2d, relu
from .errors import DomainError, FormatError
from .formats import FUSION_MAGIC, load_arrays, save_arrays
from .geometry import GridSpec
from .kernels import fusionk, traversal
from .scene import FrameObservation
from .volume import VoxelVolume, grid_entries, grid_from_entries

DEFAULT_COUNT_CAP = 64


@dataclass
class EncoderParams:
    """Two 3x3 conv layers (3 -> C_E -> C_E) with a relu between."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __post_init__(self):
        if self.w1.data.ndim != 4 or self.w1.data.shape[1:] != (3, 3, 3):
            raise DomainError("w1 must be (C_E, 3, 3, 3)")
        c_e = self.w1.data.shape[0]
        if self.w2.data.shape != (c_e, c_e, 3, 3):
            raise DomainError("w2 must be (C_E, C_E, 3, 3)")
        if self.b1.data.shape != (c_e,) or self.b2.data.shape != (c_e,):
            raise DomainError("biases must be (C_E,)")

    @property
    def channels(self) -> int:
        return self.w1.data.shape[0]

    @staticmethod
    def create(c_e: int, rng: np.random.Generator) -> "EncoderParams":
        scale1 = np.sqrt(2.0 / (3 * 9))
        scale2 = np.sqrt(2.0 / (c_e * 9))
        return EncoderParams(
            w1=Tensor.param(rng.normal(0.0, scale1, size=(c_e, 3, 3, 3))),
            b1=Tensor.param(np.zeros(c_e)),
            w2=Tensor.param(rng.normal(0.0, scale2, size=(c_e, c_e, 3, 3))),
            b2=Tensor.param(np.zeros(c_e)),
        )

    @staticmethod
    def identity() -> "EncoderParams":
        """Passthrough configuration: both layers are center-tap deltas (C_E = 3)."""
        w = np.zeros((3, 3, 3, 3))
        for c in range(3):
            w[c, c, 1, 1] = 1.0
        return EncoderParams(
            w1=Tensor.param(w.copy()),
            b1=Tensor.param(np.zeros(3)),
            w2=Tensor.param(w.copy()),
            b2=Tensor.param(np.zeros(3)),
        )

    def tensors(self) -> list:
        return [self.w1, self.b1, self.w2, self.b2]

    def named_tensors(self, prefix: str = "encoder") -> dict:
        return {
            f"{prefix}.w1": self.w1.data,
            f"{prefix}.b1": self.b1.data,
            f"{prefix}.w2": self.w2.data,
            f"{prefix}.b2": self.b2.data,
        }


def _bias_volume(bias: Tensor, like_shape) -> Tensor:
    """Expand a (C,) bias to (C, H, W) through reshape + matmul with ones."""
    c = bias.data.shape[0]
    h, w = like_shape
    col = bias.reshape((c, 1))
    ones = Tensor(np.ones((1, h * w)))
    return (col @ ones).reshape((c, h, w))


def encode_image_t(params: EncoderParams, rgb: np.ndarray) -> Tensor:
    """Differentiable encoder forward pass; returns a (C_E, H, W) tensor."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DomainError("rgb must be (H, W, 3)")
    if rgb.min() < 0 or rgb.max() > 1:
        raise DomainError("rgb values must lie in [0, 1]")
    x = Tensor(np.ascontiguousarray(rgb.transpose(2, 0, 1)))
    h = conv2d(x, params.w1) + _bias_volume(params.b1, rgb.shape[:2])
    h = relu(h)
    return conv2d(h, params.w2) + _bias_volume(params.b2, rgb.shape[:2])


def encode_image(params: EncoderParams, rgb: np.ndarray) -> np.ndarray:
    """Per-pixel C_E-dim features at input resolution, as (H, W, C_E)."""
    out = encode_image_t(params, rgb)
    return np.ascontiguousarray(out.data.transpose(1, 2, 0))


@dataclass
class FusionState:
    """Running fusion volumes over one grid."""

    grid: GridSpec
    trunc: float
    feat_mean: VoxelVolume
    feat_m2: VoxelVolume
    count: VoxelVolume
    tsdf: VoxelVolume
    tsdf_weight: VoxelVolume

    def __post_init__(self):
        if not self.trunc > 0:
            raise DomainError("trunc must be positive")
        for vol in (self.feat_mean, self.feat_m2, self.count, self.tsdf, self.tsdf_weight):
            if vol.grid != self.grid:
                raise DomainError("all volumes must share the fusion grid")
        if self.feat_mean.channels != self.feat_m2.channels:
            raise DomainError("feat_mean and feat_m2 channel counts differ")
        for name, vol in (("count", self.count), ("tsdf", self.tsdf), ("tsdf_weight", self.tsdf_weight)):
            if vol.channels != 1:
                raise DomainError(f"{name} must have one channel")

    @property
    def channels(self) -> int:
        return self.feat_mean.channels

    @staticmethod
    def empty(grid: GridSpec, channels: int, trunc: float) -> "FusionState":
        return FusionState(
            grid=grid,
            trunc=float(trunc),
            feat_mean=VoxelVolume.zeros(grid, channels),
            feat_m2=VoxelVolume.zeros(grid, channels),
            count=VoxelVolume.zeros(grid, 1),
            tsdf=VoxelVolume.zeros(grid, 1),
            tsdf_weight=VoxelVolume.zeros(grid, 1),
        )

    def copy(self) -> "FusionState":
        return FusionState(
            grid=self.grid,
            trunc=self.trunc,
            feat_mean=self.feat_mean.copy(),
            feat_m2=self.feat_m2.copy(),
            count=self.count.copy(),
            tsdf=self.tsdf.copy(),
            tsdf_weight=self.tsdf_weight.copy(),
        )


def integrate_depth(state: FusionState, frame: FrameObservation) -> FusionState:
    """Fold one depth map into the TSDF volume; returns the updated state."""
    out = state.copy()
    intr = frame.intr
    fusionk.integrate_tsdf_loop(
        np.ascontiguousarray(frame.pose.rotation.T),
        np.ascontiguousarray(frame.pose.translation),
        float(intr.fx), float(intr.fy), float(intr.cx), float(intr.cy),
        frame.depth,
        float(state.grid.origin[0]), float(state.grid.origin[1]), float(state.grid.origin[2]),
        float(state.grid.voxel_size),
        out.tsdf.data[..., 0], out.tsdf_weight.data[..., 0],
        float(state.trunc),
    )
    return out


def record_assignments(grid: GridSpec, frame: FrameObservation, trunc: float):
    """Pixel-to-voxel ray assignments for feature back-projection.

    Returns (pixel_rows, voxel_ids): flat row-major pixel indices and flat
    voxel indices, ordered pixel-major then along each ray.  Only pixels
    with valid depth contribute; each ray extends from the camera to the
    z-depth ``depth + trunc`` (capped by the grid).
    """
    intr = frame.intr
    u = (np.arange(intr.width) + 0.5 - intr.cx) / intr.fx
    v = (np.arange(intr.height) + 0.5 - intr.cy) / intr.fy
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1)
    norms = np.linalg.norm(d_cam, axis=-1)
    dirs = (d_cam @ frame.pose.rotation.T) / norms[..., None]

    depth = frame.depth
    origin = frame.pose.translation
    nx, ny, nz = grid.dims
    buf = np.empty((traversal.max_steps(grid.dims), 3), dtype=np.int64)
    pixel_rows = []
    voxel_ids = []
    flat_dirs = dirs.reshape(-1, 3)
    flat_norms = norms.reshape(-1)
    flat_depth = depth.reshape(-1)
    for p in range(flat_depth.shape[0]):
        d = flat_depth[p]
        if d <= 0.0:
            continue
        t_end = (d + trunc) * flat_norms[p]
        n = traversal.traverse_ray(
            float(origin[0]), float(origin[1]), float(origin[2]),
            float(flat_dirs[p, 0]), float(flat_dirs[p, 1]), float(flat_dirs[p, 2]),
            0.0, float(t_end),
            float(grid.origin[0]), float(grid.origin[1]), float(grid.origin[2]),
            float(grid.voxel_size), nx, ny, nz, buf,
        )
        if n:
            lin = (buf[:n, 0] * ny + buf[:n, 1]) * nz + buf[:n, 2]
            voxel_ids.append(lin.copy())
            pixel_rows.append(np.full(n, p, dtype=np.int64))
    if not pixel_rows:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    return np.concatenate(pixel_rows), np.concatenate(voxel_ids)


def backproject_features(
    state: FusionState, frame: FrameObservation, feat_map: np.ndarray
) -> FusionState:
    """Push per-pixel features along their rays into the running statistics."""
    feat_map = np.asarray(feat_map, dtype=np.float64)
    h, w = frame.depth.shape
    if feat_map.shape[:2] != (h, w) or feat_map.shape[2] != state.channels:
        raise DomainError(
            f"feat_map shape {feat_map.shape} does not match frame and state channels"
        )
    pixel_rows, voxel_ids = record_assignments(state.grid, frame, state.trunc)
    out = state.copy()
    if pixel_rows.size == 0:
        return out
    feats = np.ascontiguousarray(feat_map.reshape(-1, state.channels)[pixel_rows])
    nvox = int(np.prod(state.grid.dims))
    fusionk.welford_loop(
        voxel_ids,
        feats,
        out.feat_mean.data.reshape(nvox, state.channels),
        out.feat_m2.data.reshape(nvox, state.channels),
        out.count.data.reshape(nvox),
    )
    return out


def merge_states(a: FusionState, b: FusionState) -> FusionState:
    """Parallel-combine two fusion states over the same grid.

    Counts add; means combine count-weighted; squared deviations combine
    with the cross term n_a*n_b/n * delta^2; TSDF combines weight-averaged.
    A voxel unobserved on one side copies the other side verbatim.
    """
    if a.grid != b.grid or a.channels != b.channels or a.trunc != b.trunc:
        raise DomainError("fusion states must share grid, channels, and trunc")

    na = a.count.data
    nb = b.count.data
    n = na + nb
    safe_n = np.where(n > 0, n, 1.0)
    delta = b.feat_mean.data - a.feat_mean.data
    mean = (na * a.feat_mean.data + nb * b.feat_mean.data) / safe_n
    m2 = a.feat_m2.data + b.feat_m2.data + delta * delta * (na * nb / safe_n)
    only_a = nb == 0
    only_b = na == 0
    mean = np.where(only_a, a.feat_mean.data, np.where(only_b, b.feat_mean.data, mean))
    m2 = np.where(only_a, a.feat_m2.data, np.where(only_b, b.feat_m2.data, m2))

    wa = a.tsdf_weight.data
    wb = b.tsdf_weight.data
    wsum = wa + wb
    safe_w = np.where(wsum > 0, wsum, 1.0)
    tsdf = (wa * a.tsdf.data + wb * b.tsdf.data) / safe_w
    tsdf = np.where(wb == 0, a.tsdf.data, np.where(wa == 0, b.tsdf.data, tsdf))

    grid = a.grid
    return FusionState(
        grid=grid,
        trunc=a.trunc,
        feat_mean=VoxelVolume(grid, mean),
        feat_m2=VoxelVolume(grid, m2),
        count=VoxelVolume(grid, n),
        tsdf=VoxelVolume(grid, tsdf),
        tsdf_weight=VoxelVolume(grid, wsum),
    )


def fuse_frames(
    grid: GridSpec,
    frames,
    encoder: EncoderParams,
    trunc: float,
) -> FusionState:
    """Sequentially integrate depth and features from a frame sequence."""
    state = FusionState.empty(grid, encoder.channels, trunc)
    for frame in frames:
        state = integrate_depth(state, frame)
        state = backproject_features(state, frame, encode_image(encoder, frame.rgb))
    return state


def assemble_input(state: FusionState, count_cap: int = DEFAULT_COUNT_CAP) -> VoxelVolume:
    """Concatenate [feature mean | tsdf | normalized count | variance].

    Unobserved voxels keep zero features and variance; voxels without any
    depth observation take the free-space prior tsdf = +1.  The count
    channel is log-compressed: log(1 + count) / log(1 + count_cap).
    """
    if count_cap < 1:
        raise DomainError("count_cap must be at least 1")
    count = state.count.data
    tsdf = np.where(state.tsdf_weight.data > 0, state.tsdf.data, 1.0)
    count_norm = np.log1p(count) / np.log1p(float(count_cap))
    variance = np.mean(state.feat_m2.data, axis=3, keepdims=True) / np.maximum(count, 1.0)
    data = np.concatenate([state.feat_mean.data, tsdf, count_norm, variance], axis=3)
    return VoxelVolume(state.grid, data)


# ---------------------------------------------------------------------------
# Snapshots.

_STATE_VOLUMES = ("feat_mean", "feat_m2", "count", "tsdf", "tsdf_weight")


def save_fusion_state(path, state: FusionState) -> None:
    """Persist a fusion state (grid, truncation, and all running volumes)."""
    named = grid_entries(state.grid)
    named["trunc"] = np.array([state.trunc])
    for name in _STATE_VOLUMES:
        named[name] = getattr(state, name).data
    save_arrays(path, FUSION_MAGIC, named)


def load_fusion_state(path) -> FusionState:
    entries = load_arrays(path, FUSION_MAGIC)
    grid = grid_from_entries(entries)
    missing = [n for n in _STATE_VOLUMES + ("trunc",) if n not in entries]
    if missing:
        raise FormatError(f"fusion snapshot is missing entries {missing}")
    volumes = {n: VoxelVolume(grid, entries[n]) for n in _STATE_VOLUMES}
    return FusionState(grid=grid, trunc=float(entries["trunc"][0]), **volumes)
