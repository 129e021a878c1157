"""Adam optimizer (textbook form with bias correction)."""

from __future__ import annotations

import numpy as np

from ..errors import DomainError
from .tensor import Tensor


def adam_step(params, grads, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update over lists of numpy arrays; returns (params, state).

    ``state`` is ``None`` on the first call or a dict with keys ``t``,
    ``m``, ``v``.  Inputs are not mutated.
    """
    if len(params) != len(grads):
        raise DomainError("params and grads must align")
    if state is None:
        state = {
            "t": 0,
            "m": [np.zeros_like(p) for p in params],
            "v": [np.zeros_like(p) for p in params],
        }
    t = state["t"] + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if p.shape != g.shape:
            raise DomainError(f"grad shape {g.shape} does not match param {p.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, {"t": t, "m": new_m, "v": new_v}


class Adam:
    """Stateful wrapper updating :class:`Tensor` parameters in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        for p in self.params:
            if not isinstance(p, Tensor) or not p.requires_grad:
                raise DomainError("Adam expects trainable tensors")
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.state = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new_values, self.state = adam_step(
            [p.data for p in self.params], grads, self.state,
            lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
        )
        for p, value in zip(self.params, new_values):
            p.data[...] = value
