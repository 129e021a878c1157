"""Ray/grid intersection and voxel traversal (Amanatides & Woo stepping)."""

from __future__ import annotations

import math

import numpy as np

from ..accel import compiled


@compiled
def clip_segment_to_box(ox, oy, oz, dx, dy, dz, t0, t1, lox, loy, loz, hix, hiy, hiz):
    """Clip the ray segment [t0, t1] to an axis-aligned box via slabs.

    Returns (enter, exit); enter >= exit means no overlap.
    """
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    lo = (lox, loy, loz)
    hi = (hix, hiy, hiz)
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] >= hi[a]:
                return 1.0, 0.0
        else:
            ta = (lo[a] - o[a]) / d[a]
            tb = (hi[a] - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    return t0, t1


@compiled
def traverse_ray(
    ox, oy, oz, dx, dy, dz, t_near, t_far,
    gx, gy, gz, vs, nx, ny, nz, out,
):
    """Walk the voxels crossed by the ray segment, in order, each once.

    ``out`` is a preallocated (max_steps, 3) int64 buffer; the return value
    is the number of rows filled.  The segment is clipped to the grid box
    before stepping, so no per-step bounds checks are needed beyond the
    index-escape guards.
    """
    t0 = t_near
    t1 = t_far
    o = (ox, oy, oz)
    d = (dx, dy, dz)
    lo = (gx, gy, gz)
    hi = (gx + nx * vs, gy + ny * vs, gz + nz * vs)
    for a in range(3):
        if d[a] == 0.0:
            if o[a] < lo[a] or o[a] >= hi[a]:
                return 0
        else:
            ta = (lo[a] - o[a]) / d[a]
            tb = (hi[a] - o[a]) / d[a]
            if ta > tb:
                ta, tb = tb, ta
            if ta > t0:
                t0 = ta
            if tb < t1:
                t1 = tb
    if t0 >= t1:
        return 0

    px = (ox + t0 * dx - gx) / vs
    py = (oy + t0 * dy - gy) / vs
    pz = (oz + t0 * dz - gz) / vs
    ix = int(math.floor(px))
    iy = int(math.floor(py))
    iz = int(math.floor(pz))
    if ix < 0:
        ix = 0
    if iy < 0:
        iy = 0
    if iz < 0:
        iz = 0
    if ix > nx - 1:
        ix = nx - 1
    if iy > ny - 1:
        iy = ny - 1
    if iz > nz - 1:
        iz = nz - 1

    inf = math.inf
    step_x = 1 if dx > 0.0 else (-1 if dx < 0.0 else 0)
    step_y = 1 if dy > 0.0 else (-1 if dy < 0.0 else 0)
    step_z = 1 if dz > 0.0 else (-1 if dz < 0.0 else 0)

    if dx > 0.0:
        tmax_x = (gx + (ix + 1) * vs - ox) / dx
        tdel_x = vs / dx
    elif dx < 0.0:
        tmax_x = (gx + ix * vs - ox) / dx
        tdel_x = -vs / dx
    else:
        tmax_x = inf
        tdel_x = inf
    if dy > 0.0:
        tmax_y = (gy + (iy + 1) * vs - oy) / dy
        tdel_y = vs / dy
    elif dy < 0.0:
        tmax_y = (gy + iy * vs - oy) / dy
        tdel_y = -vs / dy
    else:
        tmax_y = inf
        tdel_y = inf
    if dz > 0.0:
        tmax_z = (gz + (iz + 1) * vs - oz) / dz
        tdel_z = vs / dz
    elif dz < 0.0:
        tmax_z = (gz + iz * vs - oz) / dz
        tdel_z = -vs / dz
    else:
        tmax_z = inf
        tdel_z = inf

    count = 0
    while True:
        out[count, 0] = ix
        out[count, 1] = iy
        out[count, 2] = iz
        count += 1
        if tmax_x <= tmax_y and tmax_x <= tmax_z:
            if tmax_x > t1:
                break
            ix += step_x
            if ix < 0 or ix >= nx:
                break
            tmax_x += tdel_x
        elif tmax_y <= tmax_z:
            if tmax_y > t1:
                break
            iy += step_y
            if iy < 0 or iy >= ny:
                break
            tmax_y += tdel_y
        else:
            if tmax_z > t1:
                break
            iz += step_z
            if iz < 0 or iz >= nz:
                break
            tmax_z += tdel_z
    return count


def max_steps(dims) -> int:
    """Upper bound on voxels a single segment can cross."""
    return int(dims[0] + dims[1] + dims[2] + 3)


def traverse(origin, direction, t_near, t_far, grid_origin, voxel_size, dims):
    """Convenience wrapper returning an (N, 3) int64 index array."""
    out = np.empty((max_steps(dims), 3), dtype=np.int64)
    n = traverse_ray(
        float(origin[0]), float(origin[1]), float(origin[2]),
        float(direction[0]), float(direction[1]), float(direction[2]),
        float(t_near), float(t_far),
        float(grid_origin[0]), float(grid_origin[1]), float(grid_origin[2]),
        float(voxel_size), int(dims[0]), int(dims[1]), int(dims[2]), out,
    )
    return out[:n].copy()
