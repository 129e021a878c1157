"""Error metrics, sparsification analysis, and rank-correlation significance.

The uncertainty-quality toolkit follows the sparsification protocol: sort
predictions by claimed uncertainty, progressively drop the most uncertain
ones, and watch the error of the retained set.  If uncertainty tracks error,
the curve decays toward the oracle curve obtained by sorting on the true
error itself; the area between the two (AUSE) and the Spearman rank
correlation summarize how well uncertainty ranks error.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DomainError

DEFAULT_ALPHA = 0.05
DEFAULT_SPARSIFICATION_STEPS = 100
ERROR_KINDS = ("mae", "mse", "rmse")
# Permutation tests enumerate n! orderings; above this n the t-approximation
# to the null distribution of rho is used instead.
EXACT_PERMUTATION_MAX_N = 8


def _flat(values, name):
    arr = np.asarray(values, dtype=np.float64).ravel()
    if arr.size == 0:
        raise DomainError(f"{name} must be nonempty")
    return arr


# ---------------------------------------------------------------------------
# Image / feature-map metrics


def image_metrics(pred, gt) -> dict:
    """Pixelwise error metrics between two images or feature maps.

    Returns ``{"mae", "mse", "rmse", "psnr", "cosine_dist"}``.  PSNR assumes
    a [0, 1] value range (peak signal 1) and reports ``inf`` for identical
    inputs.  ``cosine_dist`` treats the last axis as a per-pixel feature
    vector and averages ``1 - cos`` over pixels after unit-normalizing; a
    zero vector is treated as matching another zero vector (distance 0) and
    as orthogonal to anything else (distance 1).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DomainError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    diff = pred - gt
    mae = float(np.mean(np.abs(diff)))
    mse = float(np.mean(diff**2))
    rmse = float(np.sqrt(mse))
    psnr = float("inf") if mse == 0.0 else float(10.0 * np.log10(1.0 / mse))

    vec_pred = pred.reshape(-1, pred.shape[-1]) if pred.ndim > 1 else pred.reshape(-1, 1)
    vec_gt = gt.reshape(-1, gt.shape[-1]) if gt.ndim > 1 else gt.reshape(-1, 1)
    norm_p = np.linalg.norm(vec_pred, axis=1)
    norm_g = np.linalg.norm(vec_gt, axis=1)
    both_zero = (norm_p == 0.0) & (norm_g == 0.0)
    denom = norm_p * norm_g
    cos = np.divide(
        np.sum(vec_pred * vec_gt, axis=1),
        denom,
        out=np.zeros(len(denom)),
        where=denom > 0.0,
    )
    cos[both_zero] = 1.0
    cosine_dist = float(np.mean(1.0 - cos))
    return {"mae": mae, "mse": mse, "rmse": rmse, "psnr": psnr, "cosine_dist": cosine_dist}


# ---------------------------------------------------------------------------
# Sparsification curves and AUSE


def _removal_order(uncertainties):
    """Indices from most to least uncertain, ties broken by original index."""
    return np.argsort(-uncertainties, kind="stable")


def _remaining_mean_curve(per_item_errors, order, n_steps, take_root):
    """Mean retained error after removing floor(k/n_steps * N) items, k=0..n_steps.

    The retained mean is computed on ``per_item_errors``; ``take_root``
    applies the RMSE square root to each retained mean.  The final point
    (empty retained set) is defined as 0 and the curve is normalized by its
    first value (identically zero errors give an all-zero curve).
    """
    n = len(per_item_errors)
    sorted_errors = per_item_errors[order]
    # suffix_sums[m] = sum of errors still retained after removing m items.
    suffix_sums = np.concatenate([[0.0], np.cumsum(sorted_errors[::-1])])[::-1]
    curve = np.zeros(n_steps + 1)
    for k in range(n_steps):
        removed = (k * n) // n_steps
        curve[k] = suffix_sums[removed] / (n - removed)
    if take_root:
        curve = np.sqrt(curve)
    if curve[0] > 0.0:
        curve = curve / curve[0]
    return curve


def sparsification_curve(errors, uncertainties, n_steps: int = DEFAULT_SPARSIFICATION_STEPS):
    """Normalized mean retained error as most-uncertain items are removed."""
    errors = _flat(errors, "errors")
    uncertainties = _flat(uncertainties, "uncertainties")
    if len(errors) != len(uncertainties):
        raise DomainError("errors and uncertainties must have equal length")
    if n_steps < 1:
        raise DomainError("n_steps must be at least 1")
    return _remaining_mean_curve(errors, _removal_order(uncertainties), n_steps, False)


def ause(errors, uncertainties, error_kind: str = "mae",
         n_steps: int = DEFAULT_SPARSIFICATION_STEPS) -> float:
    """Mean gap between the uncertainty-ordered and oracle sparsification curves.

    ``error_kind`` fixes the per-item error (|e| for MAE, e^2 for MSE and
    RMSE) and, for RMSE, applies the root to each retained-set mean.  The
    oracle curve removes items by their true per-item error, which lower
    bounds every other removal order, so the result is always >= 0.
    """
    errors = _flat(errors, "errors")
    uncertainties = _flat(uncertainties, "uncertainties")
    if len(errors) != len(uncertainties):
        raise DomainError("errors and uncertainties must have equal length")
    kind = error_kind.lower()
    if kind not in ERROR_KINDS:
        raise DomainError(f"error_kind must be one of {ERROR_KINDS}, got {error_kind!r}")
    per_item = np.abs(errors) if kind == "mae" else errors**2
    take_root = kind == "rmse"
    by_unc = _remaining_mean_curve(per_item, _removal_order(uncertainties), n_steps, take_root)
    oracle = _remaining_mean_curve(per_item, _removal_order(per_item), n_steps, take_root)
    return float(np.mean(by_unc - oracle))


# ---------------------------------------------------------------------------
# Spearman rank correlation with significance


def spearman(a, b):
    """Spearman rank correlation with a two-sided p-value.

    Ranks use the average-rank convention for ties and rho is the Pearson
    correlation of the ranks.  The p-value is an exact permutation test for
    n <= 8 and the t-approximation t = rho*sqrt((n-2)/(1-rho^2)) with n-2
    degrees of freedom otherwise.  A constant input leaves rho undefined:
    (nan, 1.0) is returned.
    """
    a = _flat(a, "a")
    b = _flat(b, "b")
    if len(a) != len(b):
        raise DomainError("inputs must have equal length")
    n = len(a)
    if n < 5:
        raise DomainError("spearman needs at least 5 observations")
    if np.all(a == a[0]) or np.all(b == b[0]):
        return float("nan"), 1.0

    ra = stats.rankdata(a, method="average")
    rb = stats.rankdata(b, method="average")
    rho = _pearson(ra, rb)

    if n <= EXACT_PERMUTATION_MAX_N:
        target = abs(rho) - 1e-12
        hits = 0
        total = 0
        for perm in itertools.permutations(rb):
            total += 1
            if abs(_pearson(ra, np.array(perm))) >= target:
                hits += 1
        return float(rho), hits / total

    if abs(rho) >= 1.0:
        return float(rho), 0.0
    t = rho * np.sqrt((n - 2) / (1.0 - rho**2))
    p = 2.0 * stats.t.sf(abs(t), df=n - 2)
    return float(rho), float(min(p, 1.0))


def _pearson(x, y) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    return float(np.dot(xc, yc) / np.sqrt(np.dot(xc, xc) * np.dot(yc, yc)))


def random_uncertainty_baseline(n: int, seed: int) -> np.ndarray:
    """Uniform [0, 1) uncertainty values simulating a random ranking."""
    if n < 1:
        raise DomainError("n must be at least 1")
    return np.random.default_rng(seed).random(int(n))


# ---------------------------------------------------------------------------
# Uncertainty report


@dataclass(frozen=True)
class UncertaintyReport:
    """How well a set of uncertainties ranks the matching prediction errors."""

    errors: np.ndarray
    uncertainties: np.ndarray
    ause_mae: float
    ause_mse: float
    ause_rmse: float
    rho: float
    p_value: float
    significant: bool
    alpha: float = field(default=DEFAULT_ALPHA)

    def __post_init__(self):
        errors = np.asarray(self.errors, dtype=np.float64).ravel()
        uncertainties = np.asarray(self.uncertainties, dtype=np.float64).ravel()
        object.__setattr__(self, "errors", errors)
        object.__setattr__(self, "uncertainties", uncertainties)
        if len(errors) != len(uncertainties) or len(errors) < 10:
            raise DomainError("report needs matched arrays of length >= 10")
        if np.any(errors < 0):
            raise DomainError("errors must be non-negative")
        for name in ("ause_mae", "ause_mse", "ause_rmse"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")
        if not np.isnan(self.rho) and not -1.0 <= self.rho <= 1.0:
            raise DomainError("rho must lie in [-1, 1]")
        if not 0.0 <= self.p_value <= 1.0:
            raise DomainError("p_value must lie in [0, 1]")


def uncertainty_report(errors, uncertainties, alpha: float = DEFAULT_ALPHA,
                       n_steps: int = DEFAULT_SPARSIFICATION_STEPS) -> UncertaintyReport:
    """Bundle AUSE for all three error kinds with rank-correlation significance."""
    errors = np.abs(_flat(errors, "errors"))
    uncertainties = _flat(uncertainties, "uncertainties")
    rho, p = spearman(errors, uncertainties)
    return UncertaintyReport(
        errors=errors,
        uncertainties=uncertainties,
        ause_mae=ause(errors, uncertainties, "mae", n_steps),
        ause_mse=ause(errors, uncertainties, "mse", n_steps),
        ause_rmse=ause(errors, uncertainties, "rmse", n_steps),
        rho=rho,
        p_value=p,
        significant=bool(p < alpha),
        alpha=alpha,
    )
