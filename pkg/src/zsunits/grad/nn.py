"""Parameterized layers on top of the tensor ops.

Every module takes an explicit ``numpy.random.Generator`` for its
initialization so a seed fully determines the starting weights.
"""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import tensor as F
from .tensor import ShapeError, Tensor


class Module:
    training = True

    def __init__(self):
        self._params = OrderedDict()
        self._buffers = OrderedDict()
        self._children = OrderedDict()
        self.training = True

    def __setattr__(self, name, value):
        if isinstance(value, Module) and "_children" in self.__dict__:
            self._children[name] = value
        super().__setattr__(name, value)

    def add_param(self, name, array):
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        object.__setattr__(self, name, t)
        return t

    def add_buffer(self, name, array):
        self._buffers[name] = np.asarray(array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def state_dict(self):
        state = OrderedDict((k, p.data) for k, p in self.named_parameters())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state, strict=True):
        own = dict(self.named_parameters())
        buffers = self._buffer_owners()
        missing = [k for k in list(own) + list(buffers) if k not in state]
        unexpected = [k for k in state if k not in own and k not in buffers]
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch: missing={missing} unexpected={unexpected}")
        for name, p in own.items():
            if name in state:
                arr = np.asarray(state[name])
                if arr.shape != p.shape:
                    raise ShapeError(f"{name}: stored shape {arr.shape} != {p.shape}")
                p.data = arr.copy()
        for name, (owner, key) in buffers.items():
            if name in state:
                owner._buffers[key] = np.asarray(state[name]).copy()

    def _buffer_owners(self, prefix=""):
        out = {prefix + k: (self, k) for k in self._buffers}
        for cname, child in self._children.items():
            out.update(child._buffer_owners(f"{prefix}{cname}."))
        return out

    def astype(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for name, (owner, key) in self._buffer_owners().items():
            if np.issubdtype(owner._buffers[key].dtype, np.floating):
                owner._buffers[key] = owner._buffers[key].astype(dtype)
        return self

    def train(self, mode=True):
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng, fan_in, shape, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True, dtype=np.float32, name="linear"):
        super().__init__()
        self.name = name
        self.add_param("weight", _uniform(rng, in_features, (in_features, out_features), dtype))
        self.bias = self.add_param("bias", np.zeros(out_features, dtype)) if bias else None

    def forward(self, x):
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"{self.name}: expected last dim {self.weight.shape[0]}, got {x.shape[-1]}")
        out = x @ self.weight
        return out + self.bias if self.bias is not None else out


class Conv1d(Module):
    def __init__(
        self, cin, cout, kernel, rng, stride=1, padding="same", bias=True, dtype=np.float32, name="conv1d"
    ):
        super().__init__()
        self.name = name
        self.stride = stride
        self.padding = padding
        self.add_param("weight", _uniform(rng, cin * kernel, (cout, cin, kernel), dtype))
        self.bias = self.add_param("bias", np.zeros(cout, dtype)) if bias else None

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.weight.shape[1]:
            raise ShapeError(
                f"{self.name}: expected (N, {self.weight.shape[1]}, T) input, got {x.shape}"
            )
        return F.conv1d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose1d(Module):
    def __init__(self, cin, cout, kernel, rng, stride=1, bias=True, dtype=np.float32, name="conv_transpose1d"):
        super().__init__()
        self.name = name
        self.stride = stride
        self.add_param("weight", _uniform(rng, cin * kernel // stride, (cin, cout, kernel), dtype))
        self.bias = self.add_param("bias", np.zeros(cout, dtype)) if bias else None

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.weight.shape[0]:
            raise ShapeError(
                f"{self.name}: expected (N, {self.weight.shape[0]}, T) input, got {x.shape}"
            )
        return F.conv_transpose1d(x, self.weight, self.bias, self.stride)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, rng, bias=True, dtype=np.float32, name="conv2d"):
        super().__init__()
        self.name = name
        kh, kw = (kernel, kernel) if np.isscalar(kernel) else kernel
        self.add_param("weight", _uniform(rng, cin * kh * kw, (cout, cin, kh, kw), dtype))
        self.bias = self.add_param("bias", np.zeros(cout, dtype)) if bias else None

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.weight.shape[1]:
            raise ShapeError(
                f"{self.name}: expected (N, {self.weight.shape[1]}, H, W) input, got {x.shape}"
            )
        return F.conv2d(x, self.weight, self.bias)


class BatchNorm(Module):
    """Batch normalization over channel axis 1 (any trailing axes)."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32, name="batchnorm"):
        super().__init__()
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.add_param("gamma", np.ones(channels, dtype))
        self.add_param("beta", np.zeros(channels, dtype))
        self.add_buffer("running_mean", np.zeros(channels, dtype))
        self.add_buffer("running_var", np.ones(channels, dtype))

    def forward(self, x):
        if x.ndim < 2 or x.shape[1] != self.gamma.shape[0]:
            raise ShapeError(f"{self.name}: expected {self.gamma.shape[0]} channels, got shape {x.shape}")
        return F.batch_norm(
            x,
            self.gamma,
            self.beta,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            self.training,
            self.momentum,
            self.eps,
        )


class LeakyReLU(Module):
    def __init__(self, slope=0.01):
        super().__init__()
        self.slope = slope

    def forward(self, x):
        return F.leaky_relu(x, self.slope)


class Embedding(Module):
    def __init__(self, count, dim, rng, dtype=np.float32, name="embedding"):
        super().__init__()
        self.name = name
        self.add_param("weight", rng.normal(0.0, 1.0, size=(count, dim)).astype(dtype))

    def forward(self, index):
        index = np.asarray(index)
        if index.size and (index.min() < 0 or index.max() >= self.weight.shape[0]):
            raise ShapeError(f"{self.name}: index out of range [0, {self.weight.shape[0]})")
        return F.take_rows(self.weight, index)


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        for i, layer in enumerate(layers):
            setattr(self, str(i), layer)

    def forward(self, x):
        for layer in self._children.values():
            x = layer(x)
        return x


class ConvBlock(Module):
    """Convolution, then optional batchnorm and LeakyReLU."""

    def __init__(self, conv, channels=None, norm=True, act=True, slope=0.01, dtype=np.float32):
        super().__init__()
        self.conv = conv
        if norm:
            self.bn = BatchNorm(channels, dtype=dtype, name=f"{conv.name}.bn")
        self.norm = norm
        self.act = act
        self.slope = slope

    def forward(self, x):
        x = self.conv(x)
        if self.norm:
            x = self.bn(x)
        if self.act:
            x = F.leaky_relu(x, self.slope)
        return x
