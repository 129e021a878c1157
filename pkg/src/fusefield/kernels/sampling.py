"""Trilinear interpolation kernels over channelled voxel volumes.

Points are given in *center* coordinates: the continuous frame in which
voxel (i, j, k) has its center at (i, j, k).  Valid range per axis is
[0, dims - 1]; callers are expected to range-check before calling, the
kernels only clamp to guard against floating-point fuzz at the edges.
"""

from __future__ import annotations

import math

import numpy as np

from ..accel import backend, compiled


@compiled
def trilinear_forward_loop(vol, pts, out):
    """Sample ``vol`` (X, Y, Z, C) at ``pts`` (N, 3) into ``out`` (N, C)."""
    nx, ny, nz, nc = vol.shape
    n = pts.shape[0]
    for r in range(n):
        x = pts[r, 0]
        y = pts[r, 1]
        z = pts[r, 2]
        if nx == 1:
            i0 = 0
            fx = 0.0
        else:
            i0 = int(math.floor(x))
            if i0 < 0:
                i0 = 0
            if i0 > nx - 2:
                i0 = nx - 2
            fx = x - i0
        if ny == 1:
            j0 = 0
            fy = 0.0
        else:
            j0 = int(math.floor(y))
            if j0 < 0:
                j0 = 0
            if j0 > ny - 2:
                j0 = ny - 2
            fy = y - j0
        if nz == 1:
            k0 = 0
            fz = 0.0
        else:
            k0 = int(math.floor(z))
            if k0 < 0:
                k0 = 0
            if k0 > nz - 2:
                k0 = nz - 2
            fz = z - k0
        i1 = i0 + 1 if nx > 1 else i0
        j1 = j0 + 1 if ny > 1 else j0
        k1 = k0 + 1 if nz > 1 else k0
        w000 = (1.0 - fx) * (1.0 - fy) * (1.0 - fz)
        w001 = (1.0 - fx) * (1.0 - fy) * fz
        w010 = (1.0 - fx) * fy * (1.0 - fz)
        w011 = (1.0 - fx) * fy * fz
        w100 = fx * (1.0 - fy) * (1.0 - fz)
        w101 = fx * (1.0 - fy) * fz
        w110 = fx * fy * (1.0 - fz)
        w111 = fx * fy * fz
        for c in range(nc):
            out[r, c] = (
                w000 * vol[i0, j0, k0, c]
                + w001 * vol[i0, j0, k1, c]
                + w010 * vol[i0, j1, k0, c]
                + w011 * vol[i0, j1, k1, c]
                + w100 * vol[i1, j0, k0, c]
                + w101 * vol[i1, j0, k1, c]
                + w110 * vol[i1, j1, k0, c]
                + w111 * vol[i1, j1, k1, c]
            )


@compiled
def trilinear_backward_loop(grad_out, pts, grad_vol):
    """Scatter ``grad_out`` (N, C) back into ``grad_vol`` (X, Y, Z, C)."""
    nx, ny, nz, nc = grad_vol.shape
    n = pts.shape[0]
    for r in range(n):
        x = pts[r, 0]
        y = pts[r, 1]
        z = pts[r, 2]
        if nx == 1:
            i0 = 0
            fx = 0.0
        else:
            i0 = int(math.floor(x))
            if i0 < 0:
                i0 = 0
            if i0 > nx - 2:
                i0 = nx - 2
            fx = x - i0
        if ny == 1:
            j0 = 0
            fy = 0.0
        else:
            j0 = int(math.floor(y))
            if j0 < 0:
                j0 = 0
            if j0 > ny - 2:
                j0 = ny - 2
            fy = y - j0
        if nz == 1:
            k0 = 0
            fz = 0.0
        else:
            k0 = int(math.floor(z))
            if k0 < 0:
                k0 = 0
            if k0 > nz - 2:
                k0 = nz - 2
            fz = z - k0
        i1 = i0 + 1 if nx > 1 else i0
        j1 = j0 + 1 if ny > 1 else j0
        k1 = k0 + 1 if nz > 1 else k0
        w000 = (1.0 - fx) * (1.0 - fy) * (1.0 - fz)
        w001 = (1.0 - fx) * (1.0 - fy) * fz
        w010 = (1.0 - fx) * fy * (1.0 - fz)
        w011 = (1.0 - fx) * fy * fz
        w100 = fx * (1.0 - fy) * (1.0 - fz)
        w101 = fx * (1.0 - fy) * fz
        w110 = fx * fy * (1.0 - fz)
        w111 = fx * fy * fz
        for c in range(nc):
            g = grad_out[r, c]
            grad_vol[i0, j0, k0, c] += w000 * g
            grad_vol[i0, j0, k1, c] += w001 * g
            grad_vol[i0, j1, k0, c] += w010 * g
            grad_vol[i0, j1, k1, c] += w011 * g
            grad_vol[i1, j0, k0, c] += w100 * g
            grad_vol[i1, j0, k1, c] += w101 * g
            grad_vol[i1, j1, k0, c] += w110 * g
            grad_vol[i1, j1, k1, c] += w111 * g


def _corners_and_weights(shape, pts):
    """Vectorized corner indices and weights shared by the numpy paths."""
    pts = np.asarray(pts, dtype=np.float64)
    idx0 = []
    idx1 = []
    fracs = []
    for a in range(3):
        n = shape[a]
        p = pts[:, a]
        if n == 1:
            i0 = np.zeros(len(p), dtype=np.int64)
            f = np.zeros(len(p))
        else:
            i0 = np.clip(np.floor(p).astype(np.int64), 0, n - 2)
            f = p - i0
        idx0.append(i0)
        idx1.append(np.minimum(i0 + 1, n - 1))
        fracs.append(f)
    weights = []
    corners = []
    for bx in (0, 1):
        for by in (0, 1):
            for bz in (0, 1):
                wx = fracs[0] if bx else 1.0 - fracs[0]
                wy = fracs[1] if by else 1.0 - fracs[1]
                wz = fracs[2] if bz else 1.0 - fracs[2]
                weights.append(wx * wy * wz)
                corners.append((
                    idx1[0] if bx else idx0[0],
                    idx1[1] if by else idx0[1],
                    idx1[2] if bz else idx0[2],
                ))
    return corners, weights


def _forward_numpy(vol, pts):
    corners, weights = _corners_and_weights(vol.shape[:3], pts)
    out = np.zeros((len(pts), vol.shape[3]))
    for (ci, cj, ck), w in zip(corners, weights):
        out += w[:, None] * vol[ci, cj, ck, :]
    return out


def _backward_numpy(grad_out, pts, shape):
    grad_vol = np.zeros(shape)
    corners, weights = _corners_and_weights(shape[:3], pts)
    for (ci, cj, ck), w in zip(corners, weights):
        np.add.at(grad_vol, (ci, cj, ck), w[:, None] * grad_out)
    return grad_vol


def trilinear_forward(vol: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Sample a (X, Y, Z, C) volume at (N, 3) center coordinates."""
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    if backend() == "numpy":
        return _forward_numpy(vol, pts)
    out = np.empty((pts.shape[0], vol.shape[3]))
    trilinear_forward_loop(vol, pts, out)
    return out


def trilinear_backward(grad_out: np.ndarray, pts: np.ndarray, shape) -> np.ndarray:
    """Accumulate output gradients into a zero volume of ``shape``."""
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    pts = np.ascontiguousarray(pts, dtype=np.float64)
    shape = tuple(int(s) for s in shape)
    if backend() == "numpy":
        return _backward_numpy(grad_out, pts, shape)
    grad_vol = np.zeros(shape)
    trilinear_backward_loop(grad_out, pts, grad_vol)
    return grad_vol
