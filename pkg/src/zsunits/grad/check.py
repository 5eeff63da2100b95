from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict = field(default_factory=dict)

    @property
    def max_error(self):
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self):
        return all(e < self.tolerance for e in self.errors.values())

    def failures(self):
        return {k: e for k, e in self.errors.items() if e >= self.tolerance}

    def lines(self):
        for name, err in self.errors.items():
            status = "pass" if err < self.tolerance else "FAIL"
            yield f"{name}: max_rel_err={err:.3e} {status}"


def relative_error(analytic, numeric, floor=1e-7):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_grad(loss_fn, t, eps=1e-6, surrogate=None):
    """Central differences of ``surrogate or loss_fn`` w.r.t. every element of ``t``."""
    fn = surrogate or loss_fn
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(fn().data)
        flat[i] = orig - eps
        fm = float(fn().data)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * eps)
    return grad


def grad_check(loss_fn, tensors, tolerance=1e-4, eps=1e-6, surrogate=None):
    """Compare reverse-mode gradients of ``loss_fn()`` against central differences.

    ``tensors`` maps names to leaf tensors (double precision). ``loss_fn``
    must rebuild the graph on every call and return a scalar tensor.
    ``surrogate``, when given, is the function differentiated numerically
    instead; use it for graphs whose analytic path deliberately differs from
    the value path (stop-gradient / straight-through constructions).
    """
    tensors = dict(tensors)
    for t in tensors.values():
        if t.data.dtype != np.float64:
            raise TypeError("grad_check needs float64 tensors")
        t.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}
    report = GradCheckReport(tolerance)
    for name, t in tensors.items():
        num = numeric_grad(loss_fn, t, eps, surrogate)
        report.errors[name] = relative_error(analytic[name], num)
    for t in tensors.values():
        t.grad = None
    return report
