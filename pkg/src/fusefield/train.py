"""Uncertainty-aware training: losses, batch sampling, and the fit loop.

Supervision couples three modalities, each with a predicted log-variance
``u`` that modulates its loss through the heteroscedastic form

    L^U = 1/2 * exp(-u) * L + 1/2 * u

blended per sample with the plain base loss by a seeded Bernoulli(p) mask.
Each optimization step rebuilds the scene's fusion state from freshly drawn
reference frames, so gradients reach the 2D encoder through the recorded
pixel-to-voxel ray assignments (mean/variance accumulation is an explicit
linear scatter once assignments are fixed).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .autodiff import Adam, Tensor, concat, gather, relu, scatter_add, trilinear_sample
from .errors import DomainError, FuseFieldError
from .field import (
    DEFAULT_BETA,
    DEFAULT_FIELD_CHANNELS,
    DecoderParams,
    HIDDEN_WIDTH,
    RefineParams,
    UnifiedField,
    clamp_to_grid,
    decode_features_t,
    head_tensor_slice,
    refine,
    refine_t,
)
from .formats import load_checkpoint, save_checkpoint, save_csv
from .fusion import (
    DEFAULT_COUNT_CAP,
    EncoderParams,
    FusionState,
    assemble_input,
    encode_image_t,
    integrate_depth,
    record_assignments,
)
from .geometry import GridSpec
from .render import T_NEAR_FLOOR, composite_weights_t, density_t, grid_ray, sample_ray, weighted_sum_t
from .scene import SyntheticScene, scene_sdf_batch


@dataclass(frozen=True)
class TrainConfig:
    """Sampling sizes, loss weights, and optimization settings."""

    m_ref: int = 8
    m_tgt: int = 2
    n_ray: int = 256
    n_s: int = 64
    p: float = 0.5
    lambda_rgb: float = 1.0
    lambda_feat: float = 1.0
    lambda_tsdf: float = 1.0
    lr: float = 1e-3
    steps: int = 2000
    seed: int = 0
    trunc: float = 0.15
    count_cap: int = DEFAULT_COUNT_CAP

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise DomainError("mask probability p must lie in [0, 1]")
        for name in ("m_ref", "m_tgt", "n_ray", "n_s"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1")
        for name in ("lambda_rgb", "lambda_feat", "lambda_tsdf"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be >= 0")
        if self.steps < 0 or self.lr <= 0 or self.trunc <= 0:
            raise DomainError("need steps >= 0, lr > 0, trunc > 0")


@dataclass
class SceneData:
    """One training scene: geometry, its rendered frames, and the grid."""

    scene: SyntheticScene
    frames: list
    grid: GridSpec


@dataclass
class ModelParams:
    """All trainable parameter groups sharing one named-Tensor dictionary.

    The dataclass views (``encoder``, ``refine_params``, ``decoders``) alias
    the same float64 buffers as ``named``, so in-place optimizer updates are
    immediately visible to the fast numpy forward paths.
    """

    encoder: EncoderParams
    refine_params: RefineParams
    decoders: DecoderParams
    named: dict = dataclass_field(repr=False, default=None)

    def __post_init__(self):
        if self.named is None:
            named = {
                "encoder.w1": self.encoder.w1,
                "encoder.b1": self.encoder.b1,
                "encoder.w2": self.encoder.w2,
                "encoder.b2": self.encoder.b2,
            }
            named.update(self.refine_params.named_tensors())
            named.update(self.decoders.named_tensors())
            named["rho"] = Tensor.param(np.array([np.log(DEFAULT_BETA)]))
            self.named = named

    @property
    def rho(self) -> Tensor:
        return self.named["rho"]

    @property
    def beta(self) -> float:
        return float(np.exp(self.rho.data[0]))

    @staticmethod
    def create(c_e: int = 4, c_field: int = DEFAULT_FIELD_CHANNELS, semantic_dim: int = 16,
               hidden: int = HIDDEN_WIDTH, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        return ModelParams(
            EncoderParams.create(c_e, rng),
            RefineParams.create(c_e + 3, c_field, rng),
            DecoderParams.create(c_field, semantic_dim, rng, hidden),
        )

    def tensors(self) -> list:
        return list(self.named.values())

    def state_arrays(self) -> dict:
        return {name: t.data for name, t in self.named.items()}

    def save(self, path: str) -> None:
        save_checkpoint(path, self.state_arrays())

    @staticmethod
    def load(path: str) -> "ModelParams":
        arrays = load_checkpoint(path)
        encoder = EncoderParams(
            Tensor.param(arrays["encoder.w1"]), Tensor.param(arrays["encoder.b1"]),
            Tensor.param(arrays["encoder.w2"]), Tensor.param(arrays["encoder.b2"]),
        )
        params = ModelParams(
            encoder, RefineParams.from_named(arrays), DecoderParams.from_named(arrays)
        )
        params.rho.data[...] = arrays["rho"]
        return params

    def build_field(self, state: FusionState, count_cap: int = DEFAULT_COUNT_CAP) -> UnifiedField:
        """Refine a fused state into a queryable field (inference path)."""
        vol = assemble_input(state, count_cap)
        return UnifiedField(refine(self.refine_params, vol), self.decoders, rho=float(self.rho.data[0]))


# ---------------------------------------------------------------------------
# Losses


def bernoulli_mask(p: float, n: int, seed: int) -> np.ndarray:
    """The recorded Bernoulli(p) blend mask used by :func:`masked_loss`."""
    if not 0.0 <= p <= 1.0:
        raise DomainError("p must lie in [0, 1]")
    return (np.random.default_rng(seed).random(n) < p).astype(np.float64)


def _as_column(t: Tensor) -> Tensor:
    if t.data.ndim == 1:
        return t.reshape(t.data.shape[0], 1)
    return t


def _base_loss_t(y_hat: Tensor, y: Tensor, base: str) -> Tensor:
    """Per-sample base loss summed over channels: (M, 1)."""
    diff = y_hat - y
    if base == "l2":
        per = diff * diff
    elif base == "l1":
        per = relu(diff) + relu(diff * -1.0)
    else:
        raise DomainError(f"unknown base loss {base!r}; expected 'l1' or 'l2'")
    return per.sum(axis=1, keepdims=True)


def heteroscedastic_loss(y, y_hat: Tensor, u: Tensor, base: str = "l2") -> Tensor:
    """Batch mean of 1/2 exp(-u) L + 1/2 u."""
    y = y if isinstance(y, Tensor) else Tensor.const(np.atleast_2d(y))
    u = _as_column(u)
    loss = _base_loss_t(y_hat, y, base)
    per = 0.5 * (u * -1.0).exp() * loss + 0.5 * u
    return per.mean()


def masked_loss(ys, y_hats: Tensor, us: Tensor, p: float, base: str = "l2", seed: int = 0) -> Tensor:
    """Seeded Bernoulli blend summed over samples.

    Each sample contributes the heteroscedastic term when its mask bit is 1
    and the plain base loss otherwise; gradients reach ``us`` only through
    masked samples.
    """
    ys = ys if isinstance(ys, Tensor) else Tensor.const(np.atleast_2d(ys))
    us = _as_column(us)
    loss = _base_loss_t(y_hats, ys, base)
    m = Tensor.const(bernoulli_mask(p, loss.data.shape[0], seed)[:, None])
    het = 0.5 * (us * -1.0).exp() * loss + 0.5 * us
    return (m * het + (1.0 - m) * loss).sum()


# ---------------------------------------------------------------------------
# Batch sampling


@dataclass
class Batch:
    """One optimization step's supervision data."""

    ref_indices: tuple
    tgt_indices: tuple
    state: FusionState  # depth-fused over reference frames; features zero
    assignments: tuple  # per reference frame: (pixel_rows, voxel_ids)
    ts: np.ndarray  # (R, N)
    deltas: np.ndarray  # (R, N)
    xs: np.ndarray  # (R, N, 3)
    rgb_targets: np.ndarray  # (R, 3)
    feat_targets: np.ndarray  # (R, C_F)
    tsdf_targets: np.ndarray  # (R, N) in [-1, 1]
    ray_frames: np.ndarray  # (R,) frame index each ray was drawn from
    pixels: np.ndarray  # (R, 2) as (u, v)

    def __post_init__(self):
        r = self.ts.shape[0]
        shapes_ok = (
            self.deltas.shape == self.ts.shape
            and self.xs.shape == self.ts.shape + (3,)
            and self.rgb_targets.shape == (r, 3)
            and self.feat_targets.shape[0] == r
            and self.tsdf_targets.shape == self.ts.shape
            and self.ray_frames.shape == (r,)
            and self.pixels.shape == (r, 2)
        )
        if not shapes_ok:
            raise DomainError("inconsistent batch array shapes")
        if np.any(np.abs(self.tsdf_targets) > 1.0):
            raise DomainError("tsdf targets must lie in [-1, 1]")

    @property
    def n_rays(self) -> int:
        return self.ts.shape[0]


def _usable_pixel_indices(grid: GridSpec, frame) -> np.ndarray:
    """Flat indices of valid-depth pixels whose rays intersect the grid.

    Vectorized ray/box slab test over all pixels; a small positive overlap
    margin keeps borderline-tangent rays out so every surviving pixel also
    passes the exact per-ray clipping.
    """
    h, w = frame.depth.shape
    intr = frame.intr
    us, vs = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    cam = np.stack(
        [(us - intr.cx) / intr.fx, (vs - intr.cy) / intr.fy, np.ones_like(us)], axis=-1
    ).reshape(-1, 3)
    dirs = cam / np.linalg.norm(cam, axis=1, keepdims=True) @ frame.pose.rotation.T
    origin = frame.pose.translation
    lo, hi = grid.aabb()
    enter = np.full(len(dirs), T_NEAR_FLOOR)
    exit_ = np.full(len(dirs), 1e9)
    ok = np.ones(len(dirs), dtype=bool)
    for axis in range(3):
        d = dirs[:, axis]
        zero = d == 0.0
        ok &= ~zero | ((origin[axis] >= lo[axis]) & (origin[axis] < hi[axis]))
        with np.errstate(divide="ignore", invalid="ignore"):
            t0 = (lo[axis] - origin[axis]) / d
            t1 = (hi[axis] - origin[axis]) / d
        near = np.where(zero, -np.inf, np.minimum(t0, t1))
        far = np.where(zero, np.inf, np.maximum(t0, t1))
        enter = np.maximum(enter, near)
        exit_ = np.minimum(exit_, far)
    ok &= enter + 1e-9 < exit_
    ok &= frame.depth.reshape(-1) > 0
    return np.nonzero(ok)[0]


def sample_batch(scene: SyntheticScene, frames, grid: GridSpec, config: TrainConfig,
                 seed: int, channels: int = 1) -> Batch:
    """Draw disjoint reference/target frames, target rays, and supervision.

    Target pixels are drawn uniformly from valid-depth pixels whose rays
    intersect the grid; each ray gets stratified quadrature samples and
    analytic truncated-SDF targets at those sample points.
    """
    if len(frames) < config.m_ref + config.m_tgt:
        raise DomainError(
            f"need at least {config.m_ref + config.m_tgt} frames, got {len(frames)}"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(frames))
    ref_indices = tuple(int(i) for i in perm[: config.m_ref])
    tgt_indices = tuple(int(i) for i in perm[config.m_ref : config.m_ref + config.m_tgt])

    state = FusionState.empty(grid, channels, config.trunc)
    for i in ref_indices:
        state = integrate_depth(state, frames[i])
    assignments = tuple(
        record_assignments(grid, frames[i], config.trunc) for i in ref_indices
    )

    rays_ts, rays_deltas, rays_xs = [], [], []
    rgb_targets, feat_targets, ray_frames, pixels = [], [], [], []
    for i in tgt_indices:
        frame = frames[i]
        width = frame.depth.shape[1]
        usable = _usable_pixel_indices(grid, frame)
        if len(usable) < config.n_ray:
            raise DomainError(
                f"target frame {i} has only {len(usable)} usable pixels, need {config.n_ray}"
            )
        chosen = rng.choice(len(usable), size=config.n_ray, replace=False)
        for j in chosen:
            flat = int(usable[j])
            u, v = flat % width, flat // width
            ray = grid_ray(grid, frame.pose, frame.intr, (u, v))
            s = sample_ray(ray, config.n_s, stratified=True, seed=int(rng.integers(2**63)))
            rays_ts.append(s.ts)
            rays_deltas.append(s.deltas)
            rays_xs.append(s.xs)
            rgb_targets.append(frame.rgb[v, u])
            feat_targets.append(frame.teacher_features[v, u])
            ray_frames.append(i)
            pixels.append((u, v))

    xs = np.stack(rays_xs)
    sdf, _ = scene_sdf_batch(scene, xs.reshape(-1, 3))
    tsdf_targets = np.clip(sdf / config.trunc, -1.0, 1.0).reshape(xs.shape[:2])
    return Batch(
        ref_indices, tgt_indices, state, assignments,
        np.stack(rays_ts), np.stack(rays_deltas), xs,
        np.stack(rgb_targets), np.stack(feat_targets), tsdf_targets,
        np.asarray(ray_frames, dtype=np.int64), np.asarray(pixels, dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Differentiable fusion + rendering + total loss


def _expand_columns(col: Tensor, k: int) -> Tensor:
    return col @ Tensor.const(np.ones((1, k)))


def fused_input_tensor(params: ModelParams, batch: Batch, frames, count_cap: int) -> Tensor:
    """Assemble the refinement input volume with gradient to the encoder.

    Feature mean and variance channels are recomputed as two-pass batch
    statistics over the recorded ray assignments (equal to the sequential
    running statistics up to rounding); TSDF and count channels are constants
    of the depth-only fusion state.
    """
    state = batch.state
    dims = tuple(state.grid.dims)
    nvox = int(np.prod(dims))
    c_e = params.encoder.channels

    gathered = []
    voxel_ids_all = []
    for frame_idx, (pixel_rows, voxel_ids) in zip(batch.ref_indices, batch.assignments):
        frame = frames[frame_idx]
        h, w = frame.depth.shape
        fmap = encode_image_t(params.encoder, frame.rgb)
        flat = fmap.reshape(c_e, h * w).permute(1, 0)
        gathered.append(gather(flat, pixel_rows))
        voxel_ids_all.append(voxel_ids)
    feats = concat(gathered, axis=0) if len(gathered) > 1 else gathered[0]
    vids = np.concatenate(voxel_ids_all)

    counts = np.zeros(nvox)
    np.add.at(counts, vids, 1.0)
    safe = np.maximum(counts, 1.0)
    inv_col = Tensor.const((1.0 / safe)[:, None])

    sums = scatter_add(Tensor.const(np.zeros((nvox, c_e))), vids, feats)
    mean = sums * _expand_columns(inv_col, c_e)
    dev = feats - gather(mean, vids)
    m2 = scatter_add(Tensor.const(np.zeros((nvox, c_e))), vids, dev * dev)
    variance = m2.sum(axis=1, keepdims=True) * (1.0 / c_e) * inv_col

    mean_vol = mean.permute(1, 0).reshape((c_e,) + dims)
    var_vol = variance.permute(1, 0).reshape((1,) + dims)
    weight = state.tsdf_weight.data[..., 0]
    tsdf_chan = np.where(weight > 0, state.tsdf.data[..., 0], 1.0)[None]
    count_chan = (np.log1p(state.count.data[..., 0]) / np.log1p(count_cap))[None]
    return concat(
        [mean_vol, Tensor.const(tsdf_chan), Tensor.const(count_chan), var_vol], axis=0
    )


def total_loss(params: ModelParams, batch: Batch, frames, config: TrainConfig, mask_seed: int = 0):
    """Weighted masked losses for color, feature, and TSDF supervision.

    Returns ``(loss Tensor, breakdown dict)``; each term is normalized by its
    own sample count so the lambda weights stay comparable across batch
    shapes.
    """
    r, n = batch.ts.shape
    v_t = fused_input_tensor(params, batch, frames, config.count_cap)
    refined = refine_t(params.refine_params, v_t, named=params.named)
    vol_t = refined.permute(1, 2, 3, 0)

    coords, _ = clamp_to_grid(batch.state.grid, batch.xs.reshape(-1, 3))
    feats = trilinear_sample(vol_t, coords)

    named = params.named
    geo_mean, geo_logvar = decode_features_t(head_tensor_slice(named, "geo"), "geo", feats)
    vis_mean, vis_logvar = decode_features_t(head_tensor_slice(named, "vis"), "vis", feats)
    sem_mean, sem_logvar = decode_features_t(head_tensor_slice(named, "sem"), "sem", feats)

    beta = params.rho.exp()
    sigmas = density_t(geo_mean.reshape(r, n), beta)
    weights = composite_weights_t(sigmas, Tensor.const(batch.deltas))

    rendered_rgb = weighted_sum_t(weights, vis_mean)
    rendered_feat = weighted_sum_t(weights, sem_mean)
    rendered_logvar_c = weighted_sum_t(weights, vis_logvar)
    rendered_logvar_f = weighted_sum_t(weights, sem_logvar)

    rgb_term = masked_loss(
        batch.rgb_targets, rendered_rgb, rendered_logvar_c, config.p, "l2", mask_seed
    ) * (1.0 / r)
    feat_term = masked_loss(
        batch.feat_targets, rendered_feat, rendered_logvar_f, config.p, "l1", mask_seed + 1
    ) * (1.0 / r)
    tsdf_term = masked_loss(
        batch.tsdf_targets.reshape(-1, 1), geo_mean, geo_logvar, config.p, "l2", mask_seed + 2
    ) * (1.0 / (r * n))

    total = (
        config.lambda_rgb * rgb_term
        + config.lambda_feat * feat_term
        + config.lambda_tsdf * tsdf_term
    )
    breakdown = {
        "total": float(total.data.reshape(())),
        "rgb": float(rgb_term.data.reshape(())),
        "feat": float(feat_term.data.reshape(())),
        "tsdf": float(tsdf_term.data.reshape(())),
    }
    return total, breakdown


# ---------------------------------------------------------------------------
# Optimization loop


def _atomic_save(path: str, arrays: dict) -> None:
    tmp = path + ".tmp"
    save_checkpoint(tmp, arrays)
    os.replace(tmp, path)


def fit(scenes, config: TrainConfig, params: ModelParams = None, out_dir: str = None,
        checkpoint_every: int = 0):
    """Adam-optimize all parameter groups over sampled batches.

    Returns ``(params, history)`` where history holds one dict per step with
    the loss breakdown.  Loss history and periodic checkpoints are written
    under ``out_dir`` when given.  A non-finite loss aborts with a
    diagnostic.
    """
    if not scenes:
        raise DomainError("need at least one training scene")
    if params is None:
        params = ModelParams.create(
            semantic_dim=scenes[0].scene.feature_dim, seed=config.seed
        )
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    optimizer = Adam(params.tensors(), lr=config.lr)
    history = []
    for step in range(config.steps):
        seeds = np.random.SeedSequence(entropy=config.seed, spawn_key=(step,)).generate_state(3)
        scene_data = scenes[int(seeds[0]) % len(scenes)]
        batch = sample_batch(
            scene_data.scene, scene_data.frames, scene_data.grid, config,
            seed=int(seeds[1]), channels=params.encoder.channels,
        )
        loss, parts = total_loss(params, batch, scene_data.frames, config, mask_seed=int(seeds[2]))
        if not np.isfinite(parts["total"]):
            raise FuseFieldError(
                f"training diverged at step {step}: loss={parts['total']!r}"
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append({"step": step, **parts})
        if out_dir and checkpoint_every and (step + 1) % checkpoint_every == 0:
            _atomic_save(os.path.join(out_dir, f"checkpoint_{step + 1:06d}.ffc"), params.state_arrays())
    if out_dir:
        _atomic_save(os.path.join(out_dir, "checkpoint_final.ffc"), params.state_arrays())
        rows = [[h["step"], h["total"], h["rgb"], h["feat"], h["tsdf"]] for h in history]
        save_csv(os.path.join(out_dir, "loss_history.csv"), ["step", "total", "rgb", "feat", "tsdf"], rows)
    return params, history
