"""SGD with momentum, used for both the target (descent) and the generator (ascent)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterable

import numpy as np

from .tensor import Tensor


@dataclass
class SGD:
    """Heavy-ball SGD with L2 weight decay folded into the gradient.

    ``buf <- momentum * buf + (grad + weight_decay * p)``, then
    ``p <- p - lr * buf`` (or ``p + lr * buf`` when ``maximize``).
    The first step initialises ``buf`` to the gradient itself.
    """

    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    maximize: bool = False
    state: Dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def step(self, params: Iterable[Tensor]) -> None:
        direction = self.lr if self.maximize else -self.lr
        for p in params:
            if p.grad is None:
                continue
            d = p.grad
            if self.weight_decay:
                d = d + p.dtype.type(self.weight_decay) * p.data
            buf = self.state.get(id(p))
            if buf is None or self.momentum == 0:
                buf = np.array(d, dtype=p.dtype)
            else:
                buf = p.dtype.type(self.momentum) * buf + d
            self.state[id(p)] = buf
            p.data = p.data + p.dtype.type(direction) * buf
