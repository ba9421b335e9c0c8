"""Adam with bias correction and decoupled weight decay."""

from __future__ import annotations

import numpy as np


def adam_step(params, grads, state: dict, lr: float, weight_decay: float = 0.0,
              betas: tuple = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Update ``params`` (numpy arrays) in place.

    ``state`` holds ``"step"`` and per-parameter moment lists ``"m"``/``"v"``;
    they are created on the first call.  Weight decay shrinks the parameter
    (``θ -= lr·wd·θ``) before the Adam delta is applied.  A ``None`` gradient is
    treated as zero.
    """
    b1, b2 = betas
    if "step" not in state:
        state["step"] = 0
        state["m"] = [np.zeros_like(p) for p in params]
        state["v"] = [np.zeros_like(p) for p in params]
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        if g is None:
            g = np.zeros_like(p)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    def __init__(self, params, lr: float = 1e-4, weight_decay: float = 0.0,
                 betas: tuple = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.state: dict = {}

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                  self.lr, self.weight_decay, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
