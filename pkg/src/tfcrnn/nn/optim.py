from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import Tensor


class SGDNesterov:
    """SGD with Nesterov momentum.

    Per step, with gradient ``g`` and velocity ``v``::

        v <- momentum * v + g
        p <- p - lr * (g + momentum * v)

    Velocity buffers persist across steps and are keyed by parameter name so
    they can be checkpointed.
    """

    def __init__(self, named_params: Iterable[tuple[str, Tensor]], lr: float, momentum: float = 0.9):
        self.params = dict(named_params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        mu = self.momentum
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            v = self.velocity[name]
            v *= mu
            v += g
            p.data -= p.data.dtype.type(self.lr) * (g + mu * v)
