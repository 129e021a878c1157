"""Rule-based active object search over the incremental feature field.

An episode runs three phases: a ring of initialization views is captured and
fused; a fixed number of exploration steps each extract the predicted
surface, project visual uncertainty onto it, pick a high-uncertainty look-at
point, move there, and fuse the new observation incrementally; finally the
exploitation phase localizes the queried object as the argmax of
uncertainty-weighted contrastive similarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .field import UnifiedField, decode_batch
from .fusion import DEFAULT_COUNT_CAP, fuse_frames, merge_states
from .geometry import GridSpec, look_at
from .meshing import TriangleMesh, extract_mesh
from .scene import SyntheticScene, orbit_poses, render_frame, scene_sdf
from .semantic import (
    QuerySpec,
    combine_similarity,
    contrastive_volume,
    normalize_uncertainty,
    similarity_volume,
    surface_project,
    uncertainty_volume,
)
from .volume import VoxelVolume

PLACEMENT_ATTEMPTS = 16
# Cameras must clear solid geometry by this margin (meters) to count as a
# collision-free placement.
PLACEMENT_CLEARANCE = 1e-3
LOOKAT_POLICIES = ("uncertainty", "random")


@dataclass(frozen=True)
class PolicyConfig:
    """Knobs of the three-phase search policy."""

    n_init_views: int = 4
    n_explore_steps: int = 6
    min_lookat_distance: float = 0.3
    camera_standoff: float = 1.0
    top_quantile: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.n_init_views < 1:
            raise DomainError("n_init_views must be at least 1")
        if self.n_explore_steps < 0:
            raise DomainError("n_explore_steps must be non-negative")
        if not self.min_lookat_distance > 0 or not self.camera_standoff > 0:
            raise DomainError("distances must be positive")
        if not 0.0 < self.top_quantile < 1.0:
            raise DomainError("top_quantile must lie in (0, 1)")


@dataclass(frozen=True)
class EpisodeLog:
    """Everything a finished episode decided and measured.

    ``poses`` holds the init views, one pose per exploration step, and the
    final approach pose toward the estimate; all but the last were captured
    and fused.
    """

    poses: tuple
    step_summaries: tuple
    estimate: np.ndarray
    success: bool
    n_init_views: int
    n_explore_steps: int

    def __post_init__(self):
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "step_summaries", tuple(self.step_summaries))
        object.__setattr__(
            self, "estimate", np.asarray(self.estimate, dtype=np.float64).reshape(3)
        )
        if len(self.poses) != self.n_init_views + self.n_explore_steps + 1:
            raise DomainError("pose count must equal init + explore steps + 1")
        if len(self.step_summaries) != self.n_explore_steps:
            raise DomainError("one summary per exploration step required")

    @property
    def steps(self) -> int:
        return len(self.step_summaries)


def episode_to_dict(log: EpisodeLog) -> dict:
    """JSON-serializable view of an episode log."""
    return {
        "poses": [
            {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()}
            for p in log.poses
        ],
        "step_summaries": list(log.step_summaries),
        "estimate": log.estimate.tolist(),
        "success": log.success,
        "n_init_views": log.n_init_views,
        "n_explore_steps": log.n_explore_steps,
    }


# ---------------------------------------------------------------------------
# Phase pieces


def init_views(bounds, n: int, standoff: float):
    """``n`` poses on a horizontal ring around the bounds centroid.

    Azimuths are evenly spaced starting at 0 and every pose looks at the
    centroid.
    """
    if n < 1:
        raise DomainError("need at least one initialization view")
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    centroid = 0.5 * (lo + hi)
    return orbit_poses(centroid, standoff, 0.0, n)


def next_lookat(vertex_uncertainty, mesh: TriangleMesh, config: PolicyConfig, rng) -> np.ndarray:
    """Position of a random vertex from the highest-uncertainty surface region.

    Vertex uncertainties are quantile-normalized, vertices strictly above
    the ``top_quantile`` threshold form the candidate set, and one candidate
    is drawn uniformly.  A flat uncertainty field (no vertex strictly above
    the threshold) falls back to all vertices.
    """
    if len(mesh.vertices) == 0:
        raise DomainError("cannot explore: the surface mesh is empty")
    values = np.asarray(vertex_uncertainty, dtype=np.float64).ravel()
    if len(values) != len(mesh.vertices):
        raise DomainError("one uncertainty value per vertex required")
    normalized = normalize_uncertainty(values, "quantile")
    threshold = np.quantile(normalized, config.top_quantile)
    candidates = np.nonzero(normalized > threshold)[0]
    if len(candidates) == 0:
        candidates = np.arange(len(mesh.vertices))
    pick = candidates[int(rng.integers(len(candidates)))]
    return mesh.vertices[pick].copy()


def _place_camera(lookat, config: PolicyConfig, scene: SyntheticScene, bounds, rng):
    """A collision-free pose at standoff from ``lookat``, or None.

    The camera sits past the look-at point along the centroid-to-lookat
    direction (facing back toward it), clamped inside the scene bounds.  Up
    to PLACEMENT_ATTEMPTS jittered positions are tried before giving up.
    """
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    centroid = 0.5 * (lo + hi)
    outward = lookat - centroid
    norm = np.linalg.norm(outward)
    outward = outward / norm if norm > 1e-9 else np.array([1.0, 0.0, 0.0])
    base = lookat + config.camera_standoff * outward
    for attempt in range(PLACEMENT_ATTEMPTS):
        candidate = base if attempt == 0 else (
            base + rng.normal(0.0, 0.2 * config.camera_standoff, 3)
        )
        candidate = np.clip(candidate, lo, hi)
        distance, _, _ = scene_sdf(scene, candidate)
        if distance > PLACEMENT_CLEARANCE and np.linalg.norm(lookat - candidate) > 1e-6:
            return look_at(candidate, lookat)
    return None


def plan_view(lookat, current_pose, config: PolicyConfig, scene: SyntheticScene, bounds, rng):
    """Next camera pose observing ``lookat``, or None for a no-op.

    Look-at points closer than ``min_lookat_distance`` to the current camera
    are already well observed, so the step becomes a no-op; likewise when no
    collision-free placement is found.
    """
    lookat = np.asarray(lookat, dtype=np.float64).reshape(3)
    if np.linalg.norm(lookat - current_pose.translation) < config.min_lookat_distance:
        return None
    return _place_camera(lookat, config, scene, bounds, rng)


def exploit_target(field: UnifiedField, spec: QuerySpec, grid: GridSpec = None) -> np.ndarray:
    """Voxel center maximizing uncertainty-weighted contrastive similarity.

    The contrastive match-probability volume is weighted by the inverse
    min-max-normalized spatial (geometric) uncertainty; ties resolve to the
    lowest linear voxel index.
    """
    grid = field.grid if grid is None else grid
    raw_sim = similarity_volume(field, spec.positive, grid)
    if np.all(raw_sim.data == 0.0):
        raise DomainError("similarity is zero everywhere; nothing to localize")
    contrast = contrastive_volume(field, spec, grid)
    spatial = uncertainty_volume(field, "geo", grid)
    weight = VoxelVolume(grid, normalize_uncertainty(spatial.data, "minmax"))
    combined = combine_similarity(contrast, [weight], "spatial_only")
    flat_index = int(np.argmax(combined.data[..., 0]))
    idx = np.unravel_index(flat_index, grid.dims)
    return grid.origin + (np.asarray(idx, dtype=np.float64) + 0.5) * grid.voxel_size


def class_centroid(scene: SyntheticScene, class_id: int) -> np.ndarray:
    """Mean center of all primitives of one class (the search ground truth)."""
    centers = [
        p.center
        for p in scene.primitives
        if p.class_id == class_id and p.center is not None
    ]
    if not centers:
        raise DomainError(f"scene has no centered primitive of class {class_id}")
    return np.mean(np.asarray(centers, dtype=np.float64), axis=0)


# ---------------------------------------------------------------------------
# Full episodes


def _predicted_surface(field: UnifiedField, state) -> TriangleMesh:
    """Marching cubes over the decoded TSDF; falls back to the fused TSDF."""
    grid = field.grid
    centers = grid.voxel_centers().reshape(-1, 3)
    mean, _, _ = decode_batch(field, centers, "geo")
    mesh = extract_mesh(VoxelVolume(grid, mean.reshape(grid.dims + (1,))))
    if mesh.is_empty:
        fused = np.where(state.tsdf_weight.data > 0, state.tsdf.data, 1.0)
        mesh = extract_mesh(VoxelVolume(grid, fused))
    return mesh


def run_episode(
    scene: SyntheticScene,
    spec: QuerySpec,
    target_center,
    policy: PolicyConfig,
    params,
    grid: GridSpec,
    intr,
    trunc: float = 0.15,
    count_cap: int = DEFAULT_COUNT_CAP,
    lookat_policy: str = "uncertainty",
    seed: int = None,
    return_state: bool = False,
):
    """One full initialization/exploration/exploitation episode.

    ``params`` is a trained model (encoder, refinement, decoders);
    ``lookat_policy`` switches between uncertainty-driven look-at selection
    and the uniform-random-vertex baseline.  Success means the exploitation
    estimate lands within two voxels of ``target_center``.  Exploration
    failures (an empty surface, no collision-free placement) are logged in
    the step summaries rather than raised.
    """
    if lookat_policy not in LOOKAT_POLICIES:
        raise DomainError(f"lookat_policy must be one of {LOOKAT_POLICIES}")
    target_center = np.asarray(target_center, dtype=np.float64).reshape(3)
    rng = np.random.default_rng(policy.seed if seed is None else seed)
    bounds = (scene.bounds_lo, scene.bounds_hi)

    poses = list(init_views(bounds, policy.n_init_views, policy.camera_standoff))
    frames = [render_frame(scene, p, intr) for p in poses]
    state = fuse_frames(grid, frames, params.encoder, trunc)
    field = params.build_field(state, count_cap)
    current_pose = poses[-1]

    summaries = []
    for step in range(policy.n_explore_steps):
        summary = {"step": step, "moved": False, "aborted": ""}
        try:
            mesh = _predicted_surface(field, state)
            vertex_unc = surface_project(uncertainty_volume(field, "vis"), mesh)
            if lookat_policy == "uncertainty":
                lookat = next_lookat(vertex_unc, mesh, policy, rng)
            else:
                if len(mesh.vertices) == 0:
                    raise DomainError("cannot explore: the surface mesh is empty")
                lookat = mesh.vertices[int(rng.integers(len(mesh.vertices)))].copy()
            summary["lookat"] = lookat.tolist()
            summary["mean_uncertainty"] = float(vertex_unc.mean())
            summary["max_uncertainty"] = float(vertex_unc.max())
            planned = plan_view(lookat, current_pose, policy, scene, bounds, rng)
            if planned is not None:
                current_pose = planned
                summary["moved"] = True
        except DomainError as exc:
            summary["aborted"] = str(exc)

        frame = render_frame(scene, current_pose, intr)
        state = merge_states(state, fuse_frames(grid, [frame], params.encoder, trunc))
        field = params.build_field(state, count_cap)
        poses.append(current_pose)
        summaries.append(summary)

    estimate = exploit_target(field, spec, grid)
    approach = _place_camera(estimate, policy, scene, bounds, rng)
    poses.append(approach if approach is not None else current_pose)
    success = bool(np.linalg.norm(estimate - target_center) <= 2.0 * grid.voxel_size)

    log = EpisodeLog(
        poses=tuple(poses),
        step_summaries=tuple(summaries),
        estimate=estimate,
        success=success,
        n_init_views=policy.n_init_views,
        n_explore_steps=policy.n_explore_steps,
    )
    return (log, state) if return_state else log
