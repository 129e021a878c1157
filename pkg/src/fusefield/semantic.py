"""Semantic similarity search and uncertainty post-processing.

Queries are unit feature vectors (the toy stand-in for text embeddings).
Cosine similarity between a query and the decoded semantic feature at every
voxel center gives a similarity volume; a temperatured softmax against
negative queries sharpens it into a per-voxel match probability.  Decoded
log-variances become decision weights after normalization to [0, 1]:
similarity is down-weighted by (1 - normalized uncertainty).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .field import UnifiedField, clamp_to_grid, decode_batch
from .geometry import GridSpec
from .kernels.sampling import trilinear_forward
from .meshing import TriangleMesh
from .scene import SyntheticScene, teacher_feature
from .volume import VoxelVolume

DEFAULT_TEMPERATURE = 0.1
DEFAULT_QUANTILES = (0.05, 0.95)
NORMALIZE_MODES = ("minmax", "quantile")
COMBINE_MODES = ("spatial_only", "all_product")
_UNIT_TOL = 1e-6


def _check_unit(vec, name):
    vec = np.asarray(vec, dtype=np.float64).ravel()
    if abs(np.linalg.norm(vec) - 1.0) > _UNIT_TOL:
        raise DomainError(f"{name} must be unit-norm")
    return vec


@dataclass(frozen=True)
class QuerySpec:
    """A positive query vector contrasted against negatives at temperature tau."""

    positive: np.ndarray
    negatives: tuple = ()
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        object.__setattr__(self, "positive", _check_unit(self.positive, "positive query"))
        negs = tuple(_check_unit(v, "negative query") for v in self.negatives)
        if any(len(v) != len(self.positive) for v in negs):
            raise DomainError("negative queries must match the positive dimension")
        object.__setattr__(self, "negatives", negs)
        if not self.temperature > 0:
            raise DomainError("temperature must be positive")


def query_for_class(scene: SyntheticScene, class_id: int,
                    temperature: float = DEFAULT_TEMPERATURE) -> QuerySpec:
    """Build a QuerySpec for one scene class.

    Negatives are the teacher features of every other class present in the
    scene plus the class-0 background, mirroring how text queries are
    contrasted against generic distractors.
    """
    if class_id not in scene.class_ids():
        raise DomainError(f"scene has no class {class_id}")
    negative_ids = sorted((set(scene.class_ids()) | {0}) - {class_id})
    return QuerySpec(
        positive=teacher_feature(class_id, scene.feature_dim, scene.feature_seed),
        negatives=tuple(
            teacher_feature(cid, scene.feature_dim, scene.feature_seed)
            for cid in negative_ids
        ),
        temperature=temperature,
    )


# ---------------------------------------------------------------------------
# Similarity volumes


def _decode_at_centers(field: UnifiedField, grid: GridSpec, head: str):
    centers = grid.voxel_centers().reshape(-1, 3)
    mean, logvar, _ = decode_batch(field, centers, head)
    return mean, logvar


def similarity_volume(field: UnifiedField, query, grid: GridSpec = None) -> VoxelVolume:
    """Cosine similarity between the decoded semantic feature and ``query``.

    Evaluated at every voxel center of ``grid`` (the field's own grid by
    default).  Voxels whose decoded feature is exactly zero score 0.
    """
    query = _check_unit(query, "query")
    grid = field.grid if grid is None else grid
    mean, _ = _decode_at_centers(field, grid, "sem")
    if mean.shape[1] != len(query):
        raise DomainError(
            f"query dimension {len(query)} does not match semantic head {mean.shape[1]}"
        )
    norms = np.linalg.norm(mean, axis=1)
    sims = np.divide(mean @ query, norms, out=np.zeros(len(mean)), where=norms > 0)
    return VoxelVolume(grid, sims.reshape(grid.dims + (1,)))


def contrastive_score(sim_pos: float, sim_negs, tau: float) -> float:
    """Softmax probability of the positive similarity against negatives."""
    if not tau > 0:
        raise DomainError("temperature must be positive")
    logits = np.concatenate([[float(sim_pos)], np.asarray(sim_negs, dtype=np.float64).ravel()])
    logits = logits / tau
    shifted = np.exp(logits - logits.max())
    return float(shifted[0] / shifted.sum())


def contrastive_volume(field: UnifiedField, spec: QuerySpec,
                       grid: GridSpec = None) -> VoxelVolume:
    """Per-voxel contrastive match probability for ``spec``.

    Computes one similarity volume per query vector and applies the
    temperatured softmax voxelwise with max-subtraction.
    """
    grid = field.grid if grid is None else grid
    vols = [similarity_volume(field, spec.positive, grid)]
    vols += [similarity_volume(field, neg, grid) for neg in spec.negatives]
    logits = np.stack([v.data[..., 0] for v in vols], axis=0) / spec.temperature
    shifted = np.exp(logits - logits.max(axis=0, keepdims=True))
    probs = shifted[0] / shifted.sum(axis=0)
    return VoxelVolume(grid, probs[..., None])


def uncertainty_volume(field: UnifiedField, head: str, grid: GridSpec = None) -> VoxelVolume:
    """Decoded log-variance of one head at every voxel center (1 channel)."""
    grid = field.grid if grid is None else grid
    _, logvar = _decode_at_centers(field, grid, head)
    return VoxelVolume(grid, logvar.reshape(grid.dims + (1,)))


# ---------------------------------------------------------------------------
# Uncertainty normalization and weighting


def normalize_uncertainty(values, mode: str = "minmax",
                          quantiles=DEFAULT_QUANTILES) -> np.ndarray:
    """Map values to [0, 1] by min-max or quantile-clamped min-max.

    Quantile mode clamps to [Q(q_lo), Q(q_hi)] (linear-interpolation order
    statistics) before min-max over the clamped range, which makes the
    result invariant to the magnitude of outliers beyond Q(q_hi).  A
    constant input maps to all 0.5; a degenerate clamp range (the two
    quantiles coincide on non-constant data) falls back to plain min-max so
    isolated extremes keep their rank.
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise DomainError("values must be nonempty")
    if mode not in NORMALIZE_MODES:
        raise DomainError(f"mode must be one of {NORMALIZE_MODES}, got {mode!r}")
    lo_v, hi_v = float(arr.min()), float(arr.max())
    if lo_v == hi_v:
        return np.full(arr.shape, 0.5)
    if mode == "quantile":
        q_lo, q_hi = float(quantiles[0]), float(quantiles[1])
        if not 0.0 <= q_lo < q_hi <= 1.0:
            raise DomainError("quantiles must satisfy 0 <= q_lo < q_hi <= 1")
        lo_q = float(np.quantile(arr, q_lo))
        hi_q = float(np.quantile(arr, q_hi))
        if lo_q < hi_q:
            return (np.clip(arr, lo_q, hi_q) - lo_q) / (hi_q - lo_q)
    return (arr - lo_v) / (hi_v - lo_v)


def combine_similarity(sim: VoxelVolume, uncertainties, mode: str = "spatial_only") -> VoxelVolume:
    """Down-weight similarity by inverse normalized uncertainty.

    ``spatial_only`` multiplies by (1 - u) of the first (spatial) volume;
    ``all_product`` multiplies by (1 - u_m) of every given volume.  All
    uncertainty volumes must be normalized to [0, 1] and share the
    similarity grid.
    """
    if mode not in COMBINE_MODES:
        raise DomainError(f"mode must be one of {COMBINE_MODES}, got {mode!r}")
    uncertainties = list(uncertainties)
    if not uncertainties:
        raise DomainError("at least one uncertainty volume is required")
    for vol in uncertainties:
        if vol.grid != sim.grid:
            raise DomainError("uncertainty grid does not match similarity grid")
        if vol.data.min() < -1e-9 or vol.data.max() > 1.0 + 1e-9:
            raise DomainError("uncertainty volumes must be normalized to [0, 1]")
    used = uncertainties[:1] if mode == "spatial_only" else uncertainties
    out = sim.data.copy()
    for vol in used:
        out = out * (1.0 - vol.data)
    return VoxelVolume(sim.grid, out)


def surface_project(scalar_volume: VoxelVolume, mesh: TriangleMesh) -> np.ndarray:
    """Trilinear samples of a one-channel volume at mesh vertices, shape (V,).

    Vertices outside the grid are clamped to the interpolable boundary.
    """
    if scalar_volume.channels != 1:
        raise DomainError(f"surface_project expects one channel, got {scalar_volume.channels}")
    if len(mesh.vertices) == 0:
        return np.zeros(0)
    coords, _ = clamp_to_grid(scalar_volume.grid, mesh.vertices)
    return trilinear_forward(scalar_volume.data, coords)[:, 0]
