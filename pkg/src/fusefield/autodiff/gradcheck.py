"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import numpy as np

from ..errors import DomainError
from .tensor import Tensor


def grad_check(f, params, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` is a zero-argument callable that rebuilds the scalar graph from
    the current parameter values (it is re-invoked for every probe), and
    ``params`` are the tensors to differentiate with respect to.  The
    relative error per coordinate is |g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12).
    """
    params = list(params)
    if eps <= 0:
        raise DomainError("eps must be positive")
    for p in params:
        if not p.requires_grad:
            raise DomainError("grad_check parameters must require gradients")
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise DomainError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    worst = 0.0
    for p, g_ad in zip(params, analytic):
        flat = p.data.reshape(-1)
        g_flat = g_ad.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = f().item()
            flat[i] = keep - eps
            lo = f().item()
            flat[i] = keep
            g_fd = (hi - lo) / (2.0 * eps)
            rel = abs(g_flat[i] - g_fd) / (abs(g_flat[i]) + abs(g_fd) + 1e-12)
            if rel > worst:
                worst = rel
    return worst
