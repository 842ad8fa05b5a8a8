"""Adam with bias correction, operating on the tensor engine's leaves."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


def adam_step(param: np.ndarray, grad: np.ndarray, state: dict, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One in-place Adam update; `state` holds m, v, and the step counter t."""
    if param.shape != grad.shape:
        raise ValueError(f"adam_step shape mismatch: {param.shape} vs {grad.shape}")
    b1, b2 = betas
    state["t"] += 1
    state["m"] = b1 * state["m"] + (1.0 - b1) * grad
    state["v"] = b2 * state["v"] + (1.0 - b2) * grad * grad
    mhat = state["m"] / (1.0 - b1 ** state["t"])
    vhat = state["v"] / (1.0 - b2 ** state["t"])
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.state = [
            {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            for p in self.params
        ]

    def step(self) -> None:
        for p, st in zip(self.params, self.state):
            if p.grad is None:
                continue
            adam_step(p.data, p.grad, st, self.lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
