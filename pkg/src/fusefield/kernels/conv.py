"""3x3 / 3x3x3 convolution kernels (stride 1, zero padding 1).

Layouts: images are (C, H, W), volumes are (C, X, Y, Z); weights are
(C_out, C_in, 3, 3) and (C_out, C_in, 3, 3, 3).  The numba path loops
directly; the numpy path builds sliding windows once and contracts with
einsum.  The two paths agree to floating-point reduction-order noise.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..accel import backend, compiled


@compiled
def conv2d_loop(x, w, out):
    cin, h, wd = x.shape
    cout = w.shape[0]
    for o in range(cout):
        for i in range(h):
            for j in range(wd):
                acc = 0.0
                for c in range(cin):
                    for a in range(3):
                        ii = i + a - 1
                        if ii < 0 or ii >= h:
                            continue
                        for b in range(3):
                            jj = j + b - 1
                            if jj < 0 or jj >= wd:
                                continue
                            acc += x[c, ii, jj] * w[o, c, a, b]
                out[o, i, j] = acc


@compiled
def conv2d_grad_w_loop(x, go, gw):
    cin, h, wd = x.shape
    cout = go.shape[0]
    for o in range(cout):
        for c in range(cin):
            for a in range(3):
                for b in range(3):
                    acc = 0.0
                    for i in range(h):
                        ii = i + a - 1
                        if ii < 0 or ii >= h:
                            continue
                        for j in range(wd):
                            jj = j + b - 1
                            if jj < 0 or jj >= wd:
                                continue
                            acc += go[o, i, j] * x[c, ii, jj]
                    gw[o, c, a, b] = acc


@compiled
def conv3d_loop(x, w, out):
    cin, nx, ny, nz = x.shape
    cout = w.shape[0]
    for o in range(cout):
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    acc = 0.0
                    for c in range(cin):
                        for a in range(3):
                            ii = i + a - 1
                            if ii < 0 or ii >= nx:
                                continue
                            for b in range(3):
                                jj = j + b - 1
                                if jj < 0 or jj >= ny:
                                    continue
                                for e in range(3):
                                    kk = k + e - 1
                                    if kk < 0 or kk >= nz:
                                        continue
                                    acc += x[c, ii, jj, kk] * w[o, c, a, b, e]
                    out[o, i, j, k] = acc


@compiled
def conv3d_grad_w_loop(x, go, gw):
    cin, nx, ny, nz = x.shape
    cout = go.shape[0]
    for o in range(cout):
        for c in range(cin):
            for a in range(3):
                for b in range(3):
                    for e in range(3):
                        acc = 0.0
                        for i in range(nx):
                            ii = i + a - 1
                            if ii < 0 or ii >= nx:
                                continue
                            for j in range(ny):
                                jj = j + b - 1
                                if jj < 0 or jj >= ny:
                                    continue
                                for k in range(nz):
                                    kk = k + e - 1
                                    if kk < 0 or kk >= nz:
                                        continue
                                    acc += go[o, i, j, k] * x[c, ii, jj, kk]
                        gw[o, c, a, b, e] = acc


def _windows2d(x):
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    return sliding_window_view(xp, (3, 3), axis=(1, 2))


def _windows3d(x):
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    return sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))


def conv2d_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if backend() == "numpy":
        return np.einsum("cijab,ocab->oij", _windows2d(x), w, optimize=True)
    out = np.empty((w.shape[0],) + x.shape[1:])
    conv2d_loop(x, w, out)
    return out


def conv2d_grad_input(grad_out: np.ndarray, w: np.ndarray) -> np.ndarray:
    # Correlation with the spatially flipped, in/out-transposed weights.
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d_forward(np.ascontiguousarray(grad_out, dtype=np.float64), wt)


def conv2d_grad_weights(x: np.ndarray, grad_out: np.ndarray, w_shape) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    if backend() == "numpy":
        return np.einsum("oij,cijab->ocab", grad_out, _windows2d(x), optimize=True)
    gw = np.empty(w_shape)
    conv2d_grad_w_loop(x, grad_out, gw)
    return gw


def conv3d_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    w = np.ascontiguousarray(w, dtype=np.float64)
    if backend() == "numpy":
        return np.einsum("cxyzabe,ocabe->oxyz", _windows3d(x), w, optimize=True)
    out = np.empty((w.shape[0],) + x.shape[1:])
    conv3d_loop(x, w, out)
    return out


def conv3d_grad_input(grad_out: np.ndarray, w: np.ndarray) -> np.ndarray:
    wt = np.ascontiguousarray(w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
    return conv3d_forward(np.ascontiguousarray(grad_out, dtype=np.float64), wt)


def conv3d_grad_weights(x: np.ndarray, grad_out: np.ndarray, w_shape) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    if backend() == "numpy":
        return np.einsum("oxyz,cxyzabe->ocabe", grad_out, _windows3d(x), optimize=True)
    gw = np.empty(w_shape)
    conv3d_grad_w_loop(x, grad_out, gw)
    return gw
