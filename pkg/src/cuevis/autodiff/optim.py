from __future__ import annotations

from typing import Mapping

import numpy as np


class Adam:
    """Adam over a dict of named arrays, updated in place.

    ``lr`` may be a float or a mapping from parameter-name prefix to step size
    (longest matching prefix wins).
    """

    def __init__(self, params: Mapping[str, np.ndarray], lr=1e-3, betas=(0.9, 0.999), eps=1e-10):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}

    def lr_for(self, name: str) -> float:
        if not isinstance(self.lr, Mapping):
            return float(self.lr)
        best = None
        for prefix in self.lr:
            if name.startswith(prefix) and (best is None or len(prefix) > len(best)):
                best = prefix
        if best is None:
            raise KeyError(f"no learning rate configured for parameter {name!r}")
        return float(self.lr[best])

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1**self.t
        c2 = 1 - b2**self.t
        for name, g in grads.items():
            p = self.params[name]
            g = np.asarray(g, dtype=p.dtype)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            step = self.lr_for(name) * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p -= step.astype(p.dtype, copy=False)

    def state_dict(self) -> dict:
        out = {"t": np.asarray([self.t], dtype=np.float32)}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out
