"""Adam optimizer over a ParameterSet."""

from __future__ import annotations

import numpy as np

from ..errors import TrainingError
from .params import ParameterSet


class Adam:
    """Adaptive-moment estimation with bias correction.

    Only trainable parameters receive updates; batchnorm running statistics
    and frozen weights pass through untouched. Updates are deterministic
    given identical gradients and state.
    """

    def __init__(self, params: ParameterSet, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = {p.name: np.zeros_like(p.value) for p in params.trainable()}
        self._v = {p.name: np.zeros_like(p.value) for p in params.trainable()}

    def zero_grad(self) -> None:
        self.params.zero_grads()

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params.trainable():
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise TrainingError(f"non-finite gradient for parameter {p.name!r}")
            m = self._m[p.name]
            v = self._v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            m_hat = m / bc1
            v_hat = v / bc2
            p.value -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.value.dtype)
