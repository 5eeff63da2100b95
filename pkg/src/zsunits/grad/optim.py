from __future__ import annotations

import warnings

import numpy as np


class Adam:
    """Bias-corrected Adam over a name -> Tensor mapping.

    ``lr_scale`` maps parameter names to learning-rate multipliers.
    A step is skipped entirely (and a ``RuntimeWarning`` emitted) when any
    gradient holds a NaN or infinity.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, lr_scale=None):
        self.params = dict(params)
        self.lr = lr
        self.lr_scale = dict(lr_scale or {})
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        for k, g in grads.items():
            if not np.all(np.isfinite(g)):
                warnings.warn(f"non-finite gradient for {k}; Adam step skipped", RuntimeWarning)
                return False
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**t
        c2 = 1.0 - b2**t
        for k, g in grads.items():
            p = self.params[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = self.lr * self.lr_scale.get(k, 1.0) * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - update.astype(p.data.dtype, copy=False)
        return True

    def state_dict(self):
        state = {}
        for k in self.params:
            state[f"m.{k}"] = self.m[k]
            state[f"v.{k}"] = self.v[k]
        return state

    def load_state_dict(self, state, step_count):
        for k in self.params:
            self.m[k] = np.asarray(state[f"m.{k}"]).copy()
            self.v[k] = np.asarray(state[f"v.{k}"]).copy()
        self.step_count = int(step_count)
