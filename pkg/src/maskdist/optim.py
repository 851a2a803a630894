"""Adam with adaptive moments plus an exponential moving average of params.

Adam uses beta1=0.9, beta2=0.999, no weight decay, and an optional linear
warmup into a constant learning rate. Frozen tensors are never touched.
"""

from __future__ import annotations

import numpy as np

from maskdist.model import ModelParams


class Adam:
    def __init__(self, params: ModelParams, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, warmup_steps: int = 0):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.warmup_steps = warmup_steps
        self.t = 0
        self.m = {n: np.zeros_like(a.data) for n, a in params.trainable_items()}
        self.v = {n: np.zeros_like(a.data) for n, a in params.trainable_items()}

    def step(self):
        self.t += 1
        lr_t = self.lr
        if self.warmup_steps > 0:
            lr_t *= min(1.0, self.t / self.warmup_steps)
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, arr in self.params.trainable_items():
            g = arr.grad
            if g is None:
                g = 0.0
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            arr.data -= lr_t * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray], t: int):
        self.t = int(t)
        for name in self.m:
            self.m[name][...] = arrays[f"{prefix}.m.{name}"]
            self.v[name][...] = arrays[f"{prefix}.v.{name}"]


class Ema:
    """ema' = rate * ema + (1 - rate) * current, tracked per tensor."""

    def __init__(self, params: ModelParams, rate: float):
        self.rate = rate
        self.shadow = {n: a.data.copy() for n, a in params.arrays.items()}

    def update(self, params: ModelParams):
        r = self.rate
        for name, arr in params.arrays.items():
            s = self.shadow[name]
            s *= r
            s += (1.0 - r) * arr.data

    def as_params(self, like: ModelParams) -> ModelParams:
        out = like.copy()
        for name, arr in out.arrays.items():
            arr.data[...] = self.shadow[name]
        return out
