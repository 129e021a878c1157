"""Iso-surface extraction, ASCII mesh I/O, and 3D reconstruction metrics.

Meshes are stored in the OFF family of formats:

    OFF                       (or COFF with per-vertex colors)
    <n_vertices> <n_faces> 0
    x y z                     (one line per vertex; COFF appends "r g b")
    3 a b c                   (one line per triangle)

All numbers are written with repr-faithful precision so write -> read ->
write reproduces identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from .errors import DomainError, FormatError
from .volume import VoxelVolume

DEFAULT_RECON_THRESHOLD = 0.05
DEFAULT_RECON_POINTS = 10_000
# Triangles whose area falls below this (square meters) are dropped as
# numerically degenerate.
DEGENERATE_AREA = 1e-14


@dataclass(frozen=True)
class TriangleMesh:
    """An indexed triangle soup with vertices in world meters."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "triangles", triangles)
        if len(triangles) and (triangles.min() < 0 or triangles.max() >= len(vertices)):
            raise DomainError("triangle indices out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        a = self.vertices[self.triangles[:, 0]]
        b = self.vertices[self.triangles[:, 1]]
        c = self.vertices[self.triangles[:, 2]]
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @staticmethod
    def empty() -> "TriangleMesh":
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def extract_mesh(tsdf: VoxelVolume, iso: float = 0.0) -> TriangleMesh:
    """Marching-cubes triangulation of a one-channel volume at ``iso``.

    Vertices are mapped to world coordinates with the voxel-center
    convention (index i sits at origin + (i + 0.5) * voxel_size).  A volume
    with no sign change around ``iso`` yields an empty mesh, and zero-area
    triangles are filtered out.
    """
    if tsdf.channels != 1:
        raise DomainError(f"extract_mesh expects one channel, got {tsdf.channels}")
    scalars = tsdf.data[..., 0]
    try:
        verts, faces, _, _ = measure.marching_cubes(scalars, level=iso)
    except (ValueError, RuntimeError):
        return TriangleMesh.empty()
    grid = tsdf.grid
    world = grid.origin + (verts.astype(np.float64) + 0.5) * grid.voxel_size
    mesh = TriangleMesh(world, faces.astype(np.int64))
    keep = mesh.triangle_areas() > DEGENERATE_AREA
    if not np.all(keep):
        mesh = TriangleMesh(mesh.vertices, mesh.triangles[keep])
    return mesh


# ---------------------------------------------------------------------------
# OFF / COFF mesh files


def _fmt(x: float) -> str:
    return repr(float(x))


def save_mesh(path, mesh: TriangleMesh, colors=None) -> None:
    """Write an OFF file, or a COFF file when per-vertex colors are given.

    ``colors`` is an optional (V, 3) array of [0, 1] floats appended to each
    vertex line.
    """
    lines = []
    if colors is None:
        lines.append("OFF")
    else:
        colors = np.asarray(colors, dtype=np.float64)
        if colors.shape != (len(mesh.vertices), 3):
            raise DomainError("colors must be (n_vertices, 3)")
        lines.append("COFF")
    lines.append(f"{len(mesh.vertices)} {len(mesh.triangles)} 0")
    for i, v in enumerate(mesh.vertices):
        row = [_fmt(v[0]), _fmt(v[1]), _fmt(v[2])]
        if colors is not None:
            row += [_fmt(colors[i, 0]), _fmt(colors[i, 1]), _fmt(colors[i, 2])]
        lines.append(" ".join(row))
    for t in mesh.triangles:
        lines.append(f"3 {t[0]} {t[1]} {t[2]}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_mesh(path):
    """Read an OFF/COFF file: ``(TriangleMesh, colors or None)``."""
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] not in ("OFF", "COFF"):
        raise FormatError(f"{path}: not an OFF/COFF file")
    has_colors = lines[0] == "COFF"
    try:
        n_verts, n_faces, _ = (int(x) for x in lines[1].split())
        vert_lines = lines[2:2 + n_verts]
        face_lines = lines[2 + n_verts:2 + n_verts + n_faces]
        if len(vert_lines) != n_verts or len(face_lines) != n_faces:
            raise FormatError(f"{path}: truncated mesh file")
        verts = np.zeros((n_verts, 3))
        colors = np.zeros((n_verts, 3)) if has_colors else None
        for i, ln in enumerate(vert_lines):
            parts = [float(x) for x in ln.split()]
            verts[i] = parts[:3]
            if has_colors:
                colors[i] = parts[3:6]
        faces = np.zeros((n_faces, 3), dtype=np.int64)
        for i, ln in enumerate(face_lines):
            parts = [int(x) for x in ln.split()]
            if parts[0] != 3:
                raise FormatError(f"{path}: only triangles are supported")
            faces[i] = parts[1:4]
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed mesh file: {exc}") from exc
    return TriangleMesh(verts, faces), colors


# ---------------------------------------------------------------------------
# Reconstruction metrics


def sample_mesh_points(mesh: TriangleMesh, n_points: int, seed: int) -> np.ndarray:
    """Uniform area-weighted surface samples, shape (n_points, 3)."""
    if mesh.is_empty:
        raise DomainError("cannot sample points from an empty mesh")
    if n_points < 1:
        raise DomainError("n_points must be at least 1")
    areas = mesh.triangle_areas()
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=int(n_points), p=areas / areas.sum())
    a = mesh.vertices[mesh.triangles[tri, 0]]
    b = mesh.vertices[mesh.triangles[tri, 1]]
    c = mesh.vertices[mesh.triangles[tri, 2]]
    u = rng.random(int(n_points))
    v = rng.random(int(n_points))
    flip = u + v > 1.0
    u = np.where(flip, 1.0 - u, u)
    v = np.where(flip, 1.0 - v, v)
    return a + u[:, None] * (b - a) + v[:, None] * (c - a)


def reconstruction_metrics(pred: TriangleMesh, gt: TriangleMesh,
                           threshold: float = DEFAULT_RECON_THRESHOLD,
                           n_points: int = DEFAULT_RECON_POINTS,
                           seed: int = 0) -> dict:
    """Point-sampled surface agreement between a predicted and a true mesh.

    Samples ``n_points`` on each mesh and reports accuracy (mean nearest
    distance pred -> gt), completeness (gt -> pred), their Chamfer average,
    precision/recall (fractions below ``threshold``), and F-score.  Both
    meshes are sampled with the same seed, so identical meshes yield exactly
    zero distances and the Chamfer distance is exactly symmetric.
    """
    if pred.is_empty or gt.is_empty:
        raise DomainError("reconstruction metrics need two nonempty meshes")
    if not threshold > 0:
        raise DomainError("threshold must be positive")
    pts_pred = sample_mesh_points(pred, n_points, seed)
    pts_gt = sample_mesh_points(gt, n_points, seed)
    d_pred, _ = cKDTree(pts_gt).query(pts_pred)
    d_gt, _ = cKDTree(pts_pred).query(pts_gt)
    acc = float(d_pred.mean())
    comp = float(d_gt.mean())
    prec = float(np.mean(d_pred < threshold))
    recall = float(np.mean(d_gt < threshold))
    fscore = 0.0 if prec * recall == 0.0 else 2.0 * prec * recall / (prec + recall)
    return {
        "acc": acc,
        "comp": comp,
        "cham": 0.5 * (acc + comp),
        "prec": prec,
        "recall": recall,
        "fscore": fscore,
    }
