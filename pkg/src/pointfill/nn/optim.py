"""Adam optimizer over a flat named parameter store."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError, DimensionError
from .tensor import Tensor


def adam_step(param, grad, m, v, step, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One in-place Adam update with bias correction.

    Input:
        param, grad, m, v: same-length float64 buffers; m, v start at zeros
        step: update count BEFORE this call (0 on the first step)
    Return:
        the incremented step counter
    """
    if lr <= 0.0:
        raise ConfigError(f"adam_step: lr must be positive, got {lr}")
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise DimensionError("adam_step: param/grad/state shapes differ")
    step += 1
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * (grad * grad)
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
    return step


class Adam:
    """Adam over a dict of named parameter Tensors."""

    def __init__(self, params: dict, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        if lr <= 0.0:
            raise ConfigError(f"Adam: lr must be positive, got {lr}")
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for name, p in self.params.items():
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad[...] = 0.0
