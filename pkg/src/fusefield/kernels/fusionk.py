"""Fusion kernels: truncated-SDF depth integration and running feature stats.

Both kernels are sequential by design: the update order (voxel-major for
depth integration, assignment-major for feature statistics) is part of the
determinism contract, and the numpy backend runs the identical loop in
plain Python.
"""

from __future__ import annotations

import math

from ..accel import compiled


@compiled
def integrate_tsdf_loop(
    rot_t, trans, fx, fy, cx, cy, depth,
    gx, gy, gz, vs, tsdf, weight, trunc,
):
    """Curless-Levoy style weighted TSDF update from one depth map.

    ``rot_t`` is the transposed camera rotation (world-to-camera),
    ``tsdf``/``weight`` are (X, Y, Z) arrays updated in place with
    per-observation weight 1.
    """
    nx, ny, nz = tsdf.shape
    height, width = depth.shape
    for i in range(nx):
        wx = gx + (i + 0.5) * vs - trans[0]
        for j in range(ny):
            wy = gy + (j + 0.5) * vs - trans[1]
            for k in range(nz):
                wz = gz + (k + 0.5) * vs - trans[2]
                pz = rot_t[2, 0] * wx + rot_t[2, 1] * wy + rot_t[2, 2] * wz
                if pz <= 1e-12:
                    continue
                px = rot_t[0, 0] * wx + rot_t[0, 1] * wy + rot_t[0, 2] * wz
                py = rot_t[1, 0] * wx + rot_t[1, 1] * wy + rot_t[1, 2] * wz
                u = fx * px / pz + cx
                v = fy * py / pz + cy
                ui = int(math.floor(u))
                vi = int(math.floor(v))
                if ui < 0 or ui >= width or vi < 0 or vi >= height:
                    continue
                d = depth[vi, ui]
                if d <= 0.0:
                    continue
                sdf = d - pz
                if sdf <= -trunc:
                    continue
                value = sdf / trunc
                if value > 1.0:
                    value = 1.0
                elif value < -1.0:
                    value = -1.0
                w_old = weight[i, j, k]
                tsdf[i, j, k] = (tsdf[i, j, k] * w_old + value) / (w_old + 1.0)
                weight[i, j, k] = w_old + 1.0


@compiled
def welford_loop(voxels, feats, mean, m2, count):
    """Streaming per-voxel mean / sum-of-squared-deviation updates.

    ``voxels`` holds flat voxel ids per assignment, ``feats`` the matching
    feature rows; ``mean``/``m2`` are (V, C) and ``count`` is (V,).
    """
    nchan = feats.shape[1]
    for p in range(voxels.shape[0]):
        v = voxels[p]
        count[v] += 1.0
        inv = 1.0 / count[v]
        for c in range(nchan):
            delta = feats[p, c] - mean[v, c]
            mean[v, c] += delta * inv
            m2[v, c] += delta * (feats[p, c] - mean[v, c])
