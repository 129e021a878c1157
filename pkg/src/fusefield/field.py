"""Refinement network, continuous field queries, and two-headed decoders.

The fused input volume (feature mean, depth-fusion channel, count, variance)
is refined by a shape-preserving 3D CNN into the field volume.  Continuous
queries trilinearly interpolate that volume, and three small MLP decoders map
the interpolated feature to (mean, log-variance) pairs for the visual,
semantic, and geometric quantities.

Two forward paths exist and compute identical arithmetic:

* a Tensor path (``refine_t`` / ``decode_features_t``) used for training,
* a plain-numpy path (``refine`` / ``decode_batch``) used for rendering and
  evaluation, where no gradients are needed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, affine, clamp, conv3d, dropout, relu, sigmoid
from .errors import DomainError
from .geometry import GridSpec, world_to_center_coords
from .kernels import conv as conv_kernels
from .kernels.sampling import trilinear_forward
from .volume import VoxelVolume

LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0
HEADS = ("vis", "sem", "geo")
HIDDEN_WIDTH = 64
DEFAULT_FIELD_CHANNELS = 16
DEFAULT_BETA = 0.1

# One dropout site follows every convolution in the refinement stack:
# the stem plus two convolutions per residual block.
N_DROPOUT_SITES = 5


def _he_conv3d(rng, c_out, c_in):
    scale = np.sqrt(2.0 / (c_in * 27.0))
    return rng.normal(0.0, scale, size=(c_out, c_in, 3, 3, 3))


def _he_linear(rng, fan_in, fan_out):
    scale = np.sqrt(2.0 / fan_in)
    return rng.normal(0.0, scale, size=(fan_in, fan_out))


@dataclass(frozen=True)
class RefineParams:
    """Stem convolution plus two pre-activation residual blocks.

    The second convolution of each block is zero-initialized so a fresh
    network starts as the stem projection alone; training grows the residual
    corrections from zero.
    """

    stem_w: np.ndarray
    stem_b: np.ndarray
    block_weights: tuple  # ((w_a, b_a, w_b, b_b), ...) per residual block

    def __post_init__(self):
        if self.stem_w.ndim != 5 or self.stem_w.shape[2:] != (3, 3, 3):
            raise DomainError("stem kernel must have shape (C_out, C_in, 3, 3, 3)")
        c = self.stem_w.shape[0]
        if self.stem_b.shape != (c,):
            raise DomainError("stem bias shape mismatch")
        for wa, ba, wb, bb in self.block_weights:
            for w in (wa, wb):
                if w.shape != (c, c, 3, 3, 3):
                    raise DomainError("block kernels must be (C, C, 3, 3, 3)")
            if ba.shape != (c,) or bb.shape != (c,):
                raise DomainError("block bias shape mismatch")

    @property
    def in_channels(self) -> int:
        return self.stem_w.shape[1]

    @property
    def out_channels(self) -> int:
        return self.stem_w.shape[0]

    @staticmethod
    def create(c_in: int, c_field: int = DEFAULT_FIELD_CHANNELS, rng=None, n_blocks: int = 2):
        rng = rng or np.random.default_rng(0)
        blocks = []
        for _ in range(n_blocks):
            wa = _he_conv3d(rng, c_field, c_field)
            blocks.append((wa, np.zeros(c_field), np.zeros((c_field, c_field, 3, 3, 3)), np.zeros(c_field)))
        return RefineParams(_he_conv3d(rng, c_field, c_in), np.zeros(c_field), tuple(blocks))

    def tensors(self):
        out = [Tensor.param(self.stem_w), Tensor.param(self.stem_b)]
        for block in self.block_weights:
            out.extend(Tensor.param(a) for a in block)
        return out

    def named_tensors(self, prefix: str = "refine"):
        named = {f"{prefix}.stem_w": Tensor.param(self.stem_w), f"{prefix}.stem_b": Tensor.param(self.stem_b)}
        for i, (wa, ba, wb, bb) in enumerate(self.block_weights):
            named[f"{prefix}.b{i}_wa"] = Tensor.param(wa)
            named[f"{prefix}.b{i}_ba"] = Tensor.param(ba)
            named[f"{prefix}.b{i}_wb"] = Tensor.param(wb)
            named[f"{prefix}.b{i}_bb"] = Tensor.param(bb)
        return named

    @staticmethod
    def from_named(named, prefix: str = "refine"):
        def arr(key):
            return np.asarray(named[f"{prefix}.{key}"], dtype=np.float64)

        blocks = []
        i = 0
        while f"{prefix}.b{i}_wa" in named:
            blocks.append((arr(f"b{i}_wa"), arr(f"b{i}_ba"), arr(f"b{i}_wb"), arr(f"b{i}_bb")))
            i += 1
        return RefineParams(arr("stem_w"), arr("stem_b"), tuple(blocks))


@dataclass(frozen=True)
class HeadMLP:
    """Two hidden layers feeding a mean head and a log-variance head."""

    w1: np.ndarray
    b1: np.ndarray  # (1, H)
    w2: np.ndarray
    b2: np.ndarray
    w_mean: np.ndarray
    b_mean: np.ndarray
    w_logvar: np.ndarray
    b_logvar: np.ndarray

    def __post_init__(self):
        h = self.w1.shape[1]
        checks = [
            self.b1.shape == (1, h),
            self.w2.shape == (h, h),
            self.b2.shape == (1, h),
            self.w_mean.shape[0] == h,
            self.b_mean.shape == (1, self.w_mean.shape[1]),
            self.w_logvar.shape == (h, 1),
            self.b_logvar.shape == (1, 1),
        ]
        if not all(checks):
            raise DomainError("inconsistent decoder layer shapes")

    @property
    def mean_dim(self) -> int:
        return self.w_mean.shape[1]

    @staticmethod
    def create(c_field: int, mean_dim: int, rng, hidden: int = HIDDEN_WIDTH):
        return HeadMLP(
            _he_linear(rng, c_field, hidden), np.zeros((1, hidden)),
            _he_linear(rng, hidden, hidden), np.zeros((1, hidden)),
            _he_linear(rng, hidden, mean_dim), np.zeros((1, mean_dim)),
            _he_linear(rng, hidden, 1), np.zeros((1, 1)),
        )

    def fields(self):
        return (self.w1, self.b1, self.w2, self.b2, self.w_mean, self.b_mean, self.w_logvar, self.b_logvar)


_FIELD_NAMES = ("w1", "b1", "w2", "b2", "w_mean", "b_mean", "w_logvar", "b_logvar")


@dataclass(frozen=True)
class DecoderParams:
    """Visual, semantic, and geometric decoders sharing the field feature."""

    vis: HeadMLP
    sem: HeadMLP
    geo: HeadMLP

    def __post_init__(self):
        if self.vis.mean_dim != 3:
            raise DomainError("visual decoder mean head must have 3 channels")
        if self.geo.mean_dim != 1:
            raise DomainError("geometric decoder mean head must have 1 channel")

    @property
    def semantic_dim(self) -> int:
        return self.sem.mean_dim

    @staticmethod
    def create(c_field: int, semantic_dim: int, rng=None, hidden: int = HIDDEN_WIDTH):
        rng = rng or np.random.default_rng(0)
        return DecoderParams(
            HeadMLP.create(c_field, 3, rng, hidden),
            HeadMLP.create(c_field, semantic_dim, rng, hidden),
            HeadMLP.create(c_field, 1, rng, hidden),
        )

    def head(self, name: str) -> HeadMLP:
        if name not in HEADS:
            raise DomainError(f"unknown decoder head {name!r}; expected one of {HEADS}")
        return getattr(self, name)

    def named_tensors(self, prefix: str = "decoder"):
        named = {}
        for head_name in HEADS:
            for field_name, value in zip(_FIELD_NAMES, self.head(head_name).fields()):
                named[f"{prefix}.{head_name}.{field_name}"] = Tensor.param(value)
        return named

    @staticmethod
    def from_named(named, prefix: str = "decoder"):
        heads = {}
        for head_name in HEADS:
            values = [
                np.asarray(named[f"{prefix}.{head_name}.{field_name}"], dtype=np.float64)
                for field_name in _FIELD_NAMES
            ]
            heads[head_name] = HeadMLP(*values)
        return DecoderParams(heads["vis"], heads["sem"], heads["geo"])


@dataclass(frozen=True)
class UnifiedField:
    """Refined feature volume plus decoders and the density sharpness scale."""

    refined: VoxelVolume
    decoders: DecoderParams
    rho: float = float(np.log(DEFAULT_BETA))

    @property
    def beta(self) -> float:
        return float(np.exp(self.rho))

    @property
    def grid(self) -> GridSpec:
        return self.refined.grid


# ---------------------------------------------------------------------------
# Refinement forward passes


def _dropout_site_seeds(seed: int, pass_index: int):
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(pass_index,))
    return [int(s) for s in ss.generate_state(N_DROPOUT_SITES)]


def _bias_block(bias: Tensor, spatial_shape) -> Tensor:
    """Expand a (C,) bias to (C, X, Y, Z) without broadcasting ops."""
    n = int(np.prod(spatial_shape))
    ones = Tensor(np.ones((1, n)))
    col = bias.reshape((bias.size, 1))
    return (col @ ones).reshape((bias.size,) + tuple(spatial_shape))


def _apply_dropout_t(x: Tensor, rate: float, seeds, site: int) -> Tensor:
    if rate == 0.0 or seeds is None:
        return x
    return dropout(x, rate, seeds[site])


def refine_t(params: RefineParams, v: Tensor, named=None, dropout_rate: float = 0.0, dropout_seeds=None) -> Tensor:
    """Differentiable refinement of a (C_in, X, Y, Z) tensor.

    ``named`` optionally supplies the parameter Tensors (as produced by
    ``RefineParams.named_tensors``) so the caller can collect gradients; when
    omitted, constants built from ``params`` are used.
    """
    named = named or {k: Tensor.const(t.data) for k, t in params.named_tensors().items()}
    spatial = v.data.shape[1:]
    h = conv3d(v, named["refine.stem_w"]) + _bias_block(named["refine.stem_b"], spatial)
    h = _apply_dropout_t(h, dropout_rate, dropout_seeds, 0)
    for i in range(len(params.block_weights)):
        t = relu(h)
        t = conv3d(t, named[f"refine.b{i}_wa"]) + _bias_block(named[f"refine.b{i}_ba"], spatial)
        t = _apply_dropout_t(t, dropout_rate, dropout_seeds, 1 + 2 * i)
        t = relu(t)
        t = conv3d(t, named[f"refine.b{i}_wb"]) + _bias_block(named[f"refine.b{i}_bb"], spatial)
        t = _apply_dropout_t(t, dropout_rate, dropout_seeds, 2 + 2 * i)
        h = h + t
    return h


def _dropout_numpy(x, rate, seeds, site):
    if rate == 0.0 or seeds is None:
        return x
    keep = np.random.default_rng(seeds[site]).random(x.shape) >= rate
    return np.where(keep, x * (1.0 / (1.0 - rate)), 0.0)


def _refine_numpy(params: RefineParams, data_cxyz, dropout_rate=0.0, dropout_seeds=None):
    h = conv_kernels.conv3d_forward(data_cxyz, params.stem_w) + params.stem_b[:, None, None, None]
    h = _dropout_numpy(h, dropout_rate, dropout_seeds, 0)
    for i, (wa, ba, wb, bb) in enumerate(params.block_weights):
        t = np.maximum(h, 0.0)
        t = conv_kernels.conv3d_forward(np.ascontiguousarray(t), wa) + ba[:, None, None, None]
        t = _dropout_numpy(t, dropout_rate, dropout_seeds, 1 + 2 * i)
        t = np.maximum(t, 0.0)
        t = conv_kernels.conv3d_forward(np.ascontiguousarray(t), wb) + bb[:, None, None, None]
        t = _dropout_numpy(t, dropout_rate, dropout_seeds, 2 + 2 * i)
        h = h + t
    return h


def refine(params: RefineParams, vol: VoxelVolume, dropout_rate: float = 0.0, dropout_seeds=None) -> VoxelVolume:
    """Refine a fused input volume into the field volume (numpy fast path)."""
    if vol.channels != params.in_channels:
        raise DomainError(
            f"refine expects {params.in_channels} input channels, got {vol.channels}"
        )
    data = np.ascontiguousarray(vol.data.transpose(3, 0, 1, 2))
    out = _refine_numpy(params, data, dropout_rate, dropout_seeds)
    return VoxelVolume(vol.grid, np.ascontiguousarray(out.transpose(1, 2, 3, 0)))


# ---------------------------------------------------------------------------
# Continuous queries


def clamp_to_grid(grid: GridSpec, xs):
    """Center coordinates clamped to the interpolable region, plus a flag.

    Returns ``(coords (N,3), clamped (N,) bool)``; clamped entries were
    outside the span of voxel centers and were moved to the boundary.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    coords = world_to_center_coords(grid, xs)
    hi = np.asarray(grid.dims, dtype=np.float64) - 1.0
    clipped = np.clip(coords, 0.0, hi)
    flags = np.any(clipped != coords, axis=1)
    return np.ascontiguousarray(clipped), flags


def query_batch(field: UnifiedField, xs):
    """Trilinear field features at world points: ``((N, C), clamped (N,))``."""
    coords, flags = clamp_to_grid(field.grid, xs)
    return trilinear_forward(field.refined.data, coords), flags


def query(field: UnifiedField, x):
    """Field feature at one world point: ``((C,), clamped bool)``."""
    feats, flags = query_batch(field, np.asarray(x, dtype=np.float64).reshape(1, 3))
    return feats[0], bool(flags[0])


# ---------------------------------------------------------------------------
# Decoders


def decode_features(head_params: HeadMLP, head: str, feats):
    """Numpy decoder forward: ``(mean (N,k), logvar (N,))`` from (N,C) features."""
    h1 = feats @ head_params.w1 + head_params.b1
    h1 = np.maximum(h1, 0.0)
    h2 = h1 @ head_params.w2 + head_params.b2
    h2 = np.maximum(h2, 0.0)
    raw = h2 @ head_params.w_mean + head_params.b_mean
    logvar = np.clip(h2 @ head_params.w_logvar + head_params.b_logvar, LOGVAR_MIN, LOGVAR_MAX)
    if head == "vis":
        mean = 1.0 / (1.0 + np.exp(-raw))
    elif head == "geo":
        mean = np.tanh(raw)
    else:
        mean = raw
    return mean, logvar[:, 0]


def decode_features_t(head_named, head: str, feats: Tensor):
    """Tensor decoder forward mirroring :func:`decode_features` exactly.

    ``head_named`` maps the eight layer names (``w1`` .. ``b_logvar``) to
    Tensors, e.g. a slice of ``DecoderParams.named_tensors``.
    """
    h1 = relu(affine(feats, head_named["w1"], head_named["b1"]))
    h2 = relu(affine(h1, head_named["w2"], head_named["b2"]))
    raw = affine(h2, head_named["w_mean"], head_named["b_mean"])
    logvar = clamp(affine(h2, head_named["w_logvar"], head_named["b_logvar"]), LOGVAR_MIN, LOGVAR_MAX)
    if head == "vis":
        mean = sigmoid(raw)
    elif head == "geo":
        mean = raw.tanh()
    else:
        mean = raw
    return mean, logvar


def head_tensor_slice(named, head: str, prefix: str = "decoder"):
    """Pick one head's Tensors out of a full named-parameter dict."""
    return {f: named[f"{prefix}.{head}.{f}"] for f in _FIELD_NAMES}


def decode_batch(field: UnifiedField, xs, head: str):
    """Decode world points: ``(mean (N,k), logvar (N,), clamped (N,))``."""
    feats, flags = query_batch(field, xs)
    mean, logvar = decode_features(field.decoders.head(head), head, feats)
    return mean, logvar, flags


def decode(field: UnifiedField, x, head: str):
    """Decode one world point: ``(mean (k,), logvar float, clamped bool)``."""
    mean, logvar, flags = decode_batch(field, np.asarray(x, dtype=np.float64).reshape(1, 3), head)
    return mean[0], float(logvar[0]), bool(flags[0])


# ---------------------------------------------------------------------------
# MC-dropout epistemic variance


def mc_pass(params: RefineParams, decoders: DecoderParams, vol: VoxelVolume, xs, head: str,
            rate: float, seed: int, pass_index: int):
    """Mean-head outputs (N, k) of one stochastic refine+decode pass."""
    refined = refine(params, vol, dropout_rate=rate, dropout_seeds=_dropout_site_seeds(seed, pass_index))
    coords, _ = clamp_to_grid(refined.grid, xs)
    feats = trilinear_forward(refined.data, coords)
    mean, _ = decode_features(decoders.head(head), head, feats)
    return mean


def mc_dropout_variance(params: RefineParams, decoders: DecoderParams, vol: VoxelVolume, xs,
                        head: str, n_passes: int = 10, rate: float = 0.1, seed: int = 0):
    """Per-query epistemic variance from stochastic forward passes.

    Runs ``n_passes`` refine+decode passes with dropout active and returns the
    population variance of the mean-head outputs, averaged over output
    channels: shape (N,).
    """
    if not 0.0 < rate < 1.0:
        raise DomainError("dropout rate must lie in (0, 1)")
    if n_passes < 2:
        raise DomainError("variance needs at least two passes")
    outputs = np.stack([
        mc_pass(params, decoders, vol, xs, head, rate, seed, p) for p in range(n_passes)
    ])
    return outputs.var(axis=0, ddof=0).mean(axis=1)
