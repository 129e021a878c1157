"""Differentiable volume rendering over the unified field.

The geometric decode (a signed-distance-like value in [-1, 1]) is converted
to density through a Laplace-CDF transform with a learnable sharpness scale
``beta``.  Rays are integrated with the standard alpha-compositing quadrature

    alpha_i = 1 - exp(-sigma_i * delta_i)
    T_i     = exp(-sum_{j<i} sigma_j * delta_j)   (= prod_{j<i} (1 - alpha_j))
    w_i     = T_i * alpha_i

yielding rendered color, semantic feature, depth, per-modality log-variance,
and opacity.  The prefix-sum form of the transmittance is used in both the
numpy fast path and the Tensor training path so the two agree to rounding;
it equals the product form algebraically because 1 - alpha_j is exactly
exp(-sigma_j * delta_j).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import DomainError
from .field import UnifiedField, clamp_to_grid, decode_features
from .geometry import CameraIntrinsics, GridSpec, Pose, Ray, clip_ray_to_grid, pixel_to_ray
from .kernels.sampling import trilinear_forward

T_NEAR_FLOOR = 0.05
DEFAULT_TRAIN_SAMPLES = 64
DEFAULT_EVAL_SAMPLES = 128


# ---------------------------------------------------------------------------
# Density transform


def density(s, beta: float):
    """Laplace-CDF density: high inside surfaces (s<0), decaying outside."""
    if beta <= 0:
        raise DomainError("beta must be positive")
    s = np.asarray(s, dtype=np.float64)
    neg = (1.0 - 0.5 * np.exp(np.minimum(s, 0.0) / beta)) / beta
    pos = 0.5 * np.exp(-np.maximum(s, 0.0) / beta) / beta
    return np.where(s < 0.0, neg, pos)


def density_t(s: Tensor, beta: Tensor) -> Tensor:
    """Tensor twin of :func:`density`.

    Exponential arguments are masked to the selected branch before ``exp`` so
    the inactive branch cannot overflow when beta becomes small.
    """
    mask_neg = Tensor.const((s.data < 0.0).astype(np.float64))
    mask_pos = Tensor.const((s.data >= 0.0).astype(np.float64))
    neg = (1.0 - 0.5 * (s * mask_neg / beta).exp()) / beta
    pos = 0.5 * (s * mask_pos / beta * -1.0).exp() / beta
    return neg * mask_neg + pos * mask_pos


# ---------------------------------------------------------------------------
# Ray sampling


@dataclass(frozen=True)
class RaySamples:
    """Quadrature nodes along one ray."""

    ray: Ray
    ts: np.ndarray
    xs: np.ndarray
    deltas: np.ndarray

    def __post_init__(self):
        ts = np.asarray(self.ts, dtype=np.float64)
        if ts.ndim != 1 or len(ts) < 1:
            raise DomainError("need at least one sample")
        if np.any(np.diff(ts) <= 0):
            raise DomainError("sample depths must be strictly increasing")
        if np.any(self.deltas <= 0):
            raise DomainError("segment lengths must be positive")
        if self.xs.shape != (len(ts), 3):
            raise DomainError("xs must be (N, 3) points")

    def __len__(self):
        return len(self.ts)


def sample_ray(ray: Ray, n_samples: int, stratified: bool = False, seed: int = 0) -> RaySamples:
    """Place one sample per equal-width bin of [t_near, t_far].

    Deterministic mode uses bin midpoints; stratified mode draws one uniform
    position per bin from a seeded generator.
    """
    if n_samples < 2:
        raise DomainError("need at least two samples per ray")
    edges = np.linspace(ray.t_near, ray.t_far, n_samples + 1)
    if stratified:
        u = np.random.default_rng(seed).random(n_samples)
    else:
        u = np.full(n_samples, 0.5)
    ts = edges[:-1] + u * np.diff(edges)
    deltas = np.empty(n_samples)
    deltas[:-1] = np.diff(ts)
    deltas[-1] = ray.t_far - ts[-1]
    return RaySamples(ray, ts, ray.at(ts), deltas)


# ---------------------------------------------------------------------------
# Compositing


def _exclusive_cumsum(a: np.ndarray, axis: int = -1) -> np.ndarray:
    out = np.cumsum(a, axis=axis)
    out = np.roll(out, 1, axis=axis)
    idx = [slice(None)] * a.ndim
    idx[axis] = 0
    out[tuple(idx)] = 0.0
    return out

def composite_weights(sigmas: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Quadrature weights w_i = T_i * alpha_i along the last axis."""
    sd = sigmas * deltas
    transmittance = np.exp(-_exclusive_cumsum(sd, axis=-1))
    alpha = 1.0 - np.exp(-sd)
    return transmittance * alpha


@dataclass(frozen=True)
class RenderBuffers:
    """Rendered quantities; per-ray scalars or image-shaped arrays."""

    color: np.ndarray
    feature: np.ndarray
    depth: np.ndarray
    logvar_c: np.ndarray
    logvar_f: np.ndarray
    logvar_s: np.ndarray
    opacity: np.ndarray

    def __post_init__(self):
        op = np.asarray(self.opacity)
        if np.any(op < -1e-9) or np.any(op > 1.0 + 1e-9):
            raise DomainError("opacity must lie in [0, 1]")


def _render_flat(field: UnifiedField, xs_flat, ts, deltas):
    """Composite a (R, N) batch of samples; xs_flat is (R*N, 3) world points."""
    r, n = ts.shape
    coords, _ = clamp_to_grid(field.grid, xs_flat)
    feats = trilinear_forward(field.refined.data, coords)
    geo_mean, logvar_s = decode_features(field.decoders.geo, "geo", feats)
    vis_mean, logvar_c = decode_features(field.decoders.vis, "vis", feats)
    sem_mean, logvar_f = decode_features(field.decoders.sem, "sem", feats)
    sigmas = density(geo_mean[:, 0].reshape(r, n), field.beta)
    w = composite_weights(sigmas, deltas)
    flat_w = w.reshape(r * n, 1)

    def accumulate(values):
        return (values * flat_w).reshape(r, n, -1).sum(axis=1)

    return RenderBuffers(
        color=accumulate(vis_mean),
        feature=accumulate(sem_mean),
        depth=(w * ts).sum(axis=1),
        logvar_c=accumulate(logvar_c[:, None])[:, 0],
        logvar_f=accumulate(logvar_f[:, None])[:, 0],
        logvar_s=accumulate(logvar_s[:, None])[:, 0],
        opacity=w.sum(axis=1),
    )


def render_ray(field: UnifiedField, samples: RaySamples) -> RenderBuffers:
    """Render one ray; scalar-valued buffers."""
    out = _render_flat(
        field, samples.xs, samples.ts[None, :], samples.deltas[None, :]
    )
    return RenderBuffers(
        color=out.color[0],
        feature=out.feature[0],
        depth=float(out.depth[0]),
        logvar_c=float(out.logvar_c[0]),
        logvar_f=float(out.logvar_f[0]),
        logvar_s=float(out.logvar_s[0]),
        opacity=float(out.opacity[0]),
    )


def grid_ray(grid: GridSpec, pose: Pose, intr: CameraIntrinsics, pixel) -> Ray | None:
    """Ray through the center of pixel (u, v), clipped to the grid box.

    Returns None when the ray misses the grid.  The half-pixel offset keeps
    rendered rays aligned with the synthetic ground-truth imagery, which
    also samples pixel centers.
    """
    ray = pixel_to_ray(
        intr, pose, (pixel[0] + 0.5, pixel[1] + 0.5), t_near=T_NEAR_FLOOR, t_far=1e9
    )
    enter, exit_ = clip_ray_to_grid(grid, ray)
    if enter >= exit_:
        return None
    return Ray(ray.origin, ray.direction, enter, exit_)


def render_image(field: UnifiedField, pose: Pose, intr: CameraIntrinsics,
                 n_samples: int = DEFAULT_EVAL_SAMPLES, stride: int = 1,
                 stratified: bool = False, seed: int = 0) -> RenderBuffers:
    """Render every ``stride``-th pixel; buffers are image-shaped arrays.

    Rays that miss the grid entirely render as zeros with zero opacity.
    """
    if stride < 1:
        raise DomainError("stride must be >= 1")
    us = np.arange(0, intr.width, stride)
    vs = np.arange(0, intr.height, stride)
    h, w = len(vs), len(us)
    n_rays = h * w
    ts = np.zeros((n_rays, n_samples))
    deltas = np.full((n_rays, n_samples), 1.0)
    xs = np.zeros((n_rays, n_samples, 3))
    live = np.zeros(n_rays, dtype=bool)
    idx = 0
    for v in vs:
        for u in us:
            ray = grid_ray(field.grid, pose, intr, (u, v))
            if ray is not None:
                s = sample_ray(ray, n_samples, stratified, seed + idx)
                ts[idx] = s.ts
                deltas[idx] = s.deltas
                xs[idx] = s.xs
                live[idx] = True
            idx += 1
    out = _render_flat(field, xs.reshape(-1, 3), ts, deltas)
    dead = ~live

    def shape(a, ch=None):
        a = np.asarray(a, dtype=np.float64).copy()
        a[dead] = 0.0
        return a.reshape((h, w) if ch is None else (h, w, ch))

    return RenderBuffers(
        color=shape(out.color, 3),
        feature=shape(out.feature, field.decoders.semantic_dim),
        depth=shape(out.depth),
        logvar_c=shape(out.logvar_c),
        logvar_f=shape(out.logvar_f),
        logvar_s=shape(out.logvar_s),
        opacity=shape(out.opacity),
    )


# ---------------------------------------------------------------------------
# Tensor path (training)


def strict_lower_ones(n: int) -> np.ndarray:
    """(N, N) matrix with ones strictly below the diagonal."""
    return np.tril(np.ones((n, n)), k=-1)


def composite_weights_t(sigmas: Tensor, deltas_const: Tensor) -> Tensor:
    """Tensor twin of :func:`composite_weights` for (R, N) batches."""
    n = sigmas.data.shape[1]
    sd = sigmas * deltas_const
    prefix = sd @ Tensor.const(strict_lower_ones(n).T)
    transmittance = (prefix * -1.0).exp()
    alpha = 1.0 - (sd * -1.0).exp()
    return transmittance * alpha


def weighted_sum_t(weights: Tensor, values: Tensor) -> Tensor:
    """Per-ray weighted sums: (R, N) weights x (R*N, k) values -> (R, k)."""
    r, n = weights.data.shape
    k = values.data.shape[1]
    w_col = weights.reshape(r * n, 1)
    w_full = w_col @ Tensor.const(np.ones((1, k)))
    return (values * w_full).reshape(r, n, k).sum(axis=1)
