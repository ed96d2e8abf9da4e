"""Plain-array optimizers: momentum SGD for network weights, Adam for
architecture logits and for the cost projection inner loop.

Both operate on Tensors through the .grad buffer and keep their state in
JSON-serializable lists so checkpoints stay auditable.
"""
from __future__ import annotations

import numpy as np

from .autodiff import Tensor

__all__ = ["SGD", "Adam"]


class SGD:
    """SGD with classical momentum and decoupled-from-nothing weight decay
    (decay is added to the gradient, as usual)."""

    def __init__(self, params: list[Tensor], lr: float = 0.025, momentum: float = 0.9, weight_decay: float = 3e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self._velocity):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - self.lr * v

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {"velocity": [v.tolist() for v in self._velocity]}

    def load_state_dict(self, state: dict) -> None:
        vel = state["velocity"]
        if len(vel) != len(self.params):
            raise ValueError("optimizer state does not match parameter count")
        self._velocity = [np.asarray(v, dtype=np.float64).reshape(p.data.shape) for v, p in zip(vel, self.params)]


class Adam:
    """Adam with bias correction; defaults follow the architecture-step
    settings (lr 3e-4, betas (0.5, 0.999), no weight decay)."""

    def __init__(
        self,
        params: list[Tensor],
        lr: float = 3e-4,
        betas: tuple[float, float] = (0.5, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]
        self._t = 0

    def step(self) -> None:
        self._t += 1
        b1c = 1.0 - self.beta1**self._t
        b2c = 1.0 - self.beta2**self._t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / b1c
            vhat = v / b2c
            p.data = p.data - self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "t": self._t,
            "m": [m.tolist() for m in self._m],
            "v": [v.tolist() for v in self._v],
        }

    def load_state_dict(self, state: dict) -> None:
        if len(state["m"]) != len(self.params):
            raise ValueError("optimizer state does not match parameter count")
        self._t = int(state["t"])
        self._m = [np.asarray(m, dtype=np.float64).reshape(p.data.shape) for m, p in zip(state["m"], self.params)]
        self._v = [np.asarray(v, dtype=np.float64).reshape(p.data.shape) for v, p in zip(state["v"], self.params)]
