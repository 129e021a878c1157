"""Sphere-tracing kernels over encoded SDF primitive lists.

Primitives are encoded into flat arrays so the hot loop can run under
numba: ``kinds`` holds one of (0 sphere, 1 box, 2 plane) per primitive and
``params`` packs (center, radius) / (center, half_extents) / (normal,
offset) rows.  The numpy backend uses a vectorized batch tracer that
performs the identical arithmetic.
"""

from __future__ import annotations

import math

import numpy as np

from ..accel import compiled

KIND_SPHERE = 0
KIND_BOX = 1
KIND_PLANE = 2

HIT_EPS = 1e-4
MAX_ITERS = 256
POLISH_ITERS = 3
NORMAL_H = 1e-5


@compiled
def trace_rays(kinds, params, ox, oy, oz, dirs, t_max, out_t, out_idx, out_n):
    """March each ray to the first surface; fill hit t, primitive id, normal.

    Misses leave ``out_idx`` at -1.  Normals come from central differences
    of the scene SDF at the hit point.
    """
    nprim = kinds.shape[0]
    nray = dirs.shape[0]

    def sdf(x, y, z):
        best = 1e30
        bi = -1
        for i in range(nprim):
            k = kinds[i]
            if k == 0:
                px = x - params[i, 0]
                py = y - params[i, 1]
                pz = z - params[i, 2]
                d = math.sqrt(px * px + py * py + pz * pz) - params[i, 3]
            elif k == 1:
                qx = abs(x - params[i, 0]) - params[i, 3]
                qy = abs(y - params[i, 1]) - params[i, 4]
                qz = abs(z - params[i, 2]) - params[i, 5]
                mx = qx if qx > 0.0 else 0.0
                my = qy if qy > 0.0 else 0.0
                mz = qz if qz > 0.0 else 0.0
                outside = math.sqrt(mx * mx + my * my + mz * mz)
                qmax = qx
                if qy > qmax:
                    qmax = qy
                if qz > qmax:
                    qmax = qz
                inside = qmax if qmax < 0.0 else 0.0
                d = outside + inside
            else:
                d = (
                    params[i, 0] * x + params[i, 1] * y + params[i, 2] * z
                    - params[i, 3]
                )
            if d < best:
                best = d
                bi = i
        return best, bi

    for r in range(nray):
        dx = dirs[r, 0]
        dy = dirs[r, 1]
        dz = dirs[r, 2]
        t = 0.0
        hit = -1
        for _ in range(MAX_ITERS):
            x = ox + t * dx
            y = oy + t * dy
            z = oz + t * dz
            d, bi = sdf(x, y, z)
            if abs(d) < HIT_EPS:
                hit = bi
                break
            t += d
            if t > t_max:
                break
        out_idx[r] = hit
        if hit >= 0:
            # A few fixed polish steps sharpen grazing hits; the hit/miss
            # decision above is already made and stays put.
            for _ in range(POLISH_ITERS):
                t += sdf(ox + t * dx, oy + t * dy, oz + t * dz)[0]
            out_t[r] = t
            x = ox + t * dx
            y = oy + t * dy
            z = oz + t * dz
            gx = sdf(x + NORMAL_H, y, z)[0] - sdf(x - NORMAL_H, y, z)[0]
            gy = sdf(x, y + NORMAL_H, z)[0] - sdf(x, y - NORMAL_H, z)[0]
            gz = sdf(x, y, z + NORMAL_H)[0] - sdf(x, y, z - NORMAL_H)[0]
            norm = math.sqrt(gx * gx + gy * gy + gz * gz)
            if norm > 0.0:
                out_n[r, 0] = gx / norm
                out_n[r, 1] = gy / norm
                out_n[r, 2] = gz / norm
            else:
                out_n[r, 0] = 0.0
                out_n[r, 1] = 0.0
                out_n[r, 2] = 1.0
        else:
            out_t[r] = 0.0
            out_n[r, 0] = 0.0
            out_n[r, 1] = 0.0
            out_n[r, 2] = 0.0


def sdf_batch(kinds, params, pts):
    """Vectorized scene SDF: returns (distance (N,), argmin index (N,))."""
    pts = np.asarray(pts, dtype=np.float64)
    n = pts.shape[0]
    dists = np.empty((kinds.shape[0], n))
    for i in range(kinds.shape[0]):
        k = kinds[i]
        if k == KIND_SPHERE:
            delta = pts - params[i, 0:3]
            dists[i] = np.sqrt(np.sum(delta * delta, axis=1)) - params[i, 3]
        elif k == KIND_BOX:
            q = np.abs(pts - params[i, 0:3]) - params[i, 3:6]
            outside = np.sqrt(np.sum(np.maximum(q, 0.0) ** 2, axis=1))
            inside = np.minimum(np.max(q, axis=1), 0.0)
            dists[i] = outside + inside
        else:
            dists[i] = pts @ params[i, 0:3] - params[i, 3]
    idx = np.argmin(dists, axis=0)
    return dists[idx, np.arange(n)], idx


def trace_rays_numpy(kinds, params, origin, dirs, t_max):
    """Vectorized sphere tracing; same stepping rule as the loop kernel."""
    nray = dirs.shape[0]
    t = np.zeros(nray)
    hit_idx = np.full(nray, -1, dtype=np.int64)
    active = np.ones(nray, dtype=bool)
    for _ in range(MAX_ITERS):
        if not np.any(active):
            break
        pts = origin + t[active, None] * dirs[active]
        d, bi = sdf_batch(kinds, params, pts)
        converged = np.abs(d) < HIT_EPS
        act_ids = np.flatnonzero(active)
        hit_idx[act_ids[converged]] = bi[converged]
        t_new = t[active] + np.where(converged, 0.0, d)
        t[active] = t_new
        still = ~converged & (t_new <= t_max)
        active[act_ids] = still
    hits_mask = hit_idx >= 0
    for _ in range(POLISH_ITERS):
        pts = origin + t[hits_mask, None] * dirs[hits_mask]
        t[hits_mask] += sdf_batch(kinds, params, pts)[0]
    out_t = np.where(hits_mask, t, 0.0)
    normals = np.zeros((nray, 3))
    hits = hit_idx >= 0
    if np.any(hits):
        p = origin + out_t[hits, None] * dirs[hits]
        grad = np.empty((hits.sum(), 3))
        for a in range(3):
            dp = np.zeros(3)
            dp[a] = NORMAL_H
            grad[:, a] = sdf_batch(kinds, params, p + dp)[0] - sdf_batch(
                kinds, params, p - dp
            )[0]
        norm = np.linalg.norm(grad, axis=1)
        safe = norm > 0
        grad[safe] /= norm[safe, None]
        grad[~safe] = (0.0, 0.0, 1.0)
        normals[hits] = grad
    return out_t, hit_idx, normals
