"""Reverse-mode autodiff over numpy arrays.

Graphs are built dynamically as operations run. Each non-leaf tensor keeps
its parents and a closure that maps the upstream gradient to one gradient
per parent. ``Tensor.backward`` walks the graph in reverse topological
order and accumulates into ``.grad`` of leaves (and of any tensor that
called ``retain_grad``).
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class GraphStateError(RuntimeError):
    """Backward requested on a tensor with no live graph."""


class ShapeError(ValueError):
    """Incompatible shapes while building a graph."""


def _as_array(data, dtype=None):
    arr = np.asarray(data, dtype=dtype)
    if dtype is None and not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, _op=""):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._op = _op
        self._retain = False
        self._freed = False

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def T(self):
        return self.transpose()

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def retain_grad(self):
        """Keep the gradient of a non-leaf tensor after backward."""
        self._retain = True
        return self

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- backward ---------------------------------------------------------
    def backward(self, grad=None, retain_graph=False):
        if not self.requires_grad:
            raise GraphStateError("tensor does not require grad; nothing to differentiate")
        if self._freed:
            raise GraphStateError("graph already freed by a previous backward call")
        if grad is None:
            if self.data.size != 1:
                raise GraphStateError("backward without upstream gradient needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad, self.data.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"upstream gradient shape {grad.shape} != output shape {self.shape}")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None or node._retain:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is not None:
                parent_grads = node._backward(g)
                for parent, pg in zip(node._parents, parent_grads):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    if key in grads:
                        grads[key] = grads[key] + pg
                    else:
                        grads[key] = pg
                if not retain_graph:
                    node._backward = None
                    node._parents = ()
                    node._freed = True

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _topological_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad=False, dtype=None):
    return Tensor(_as_array(data, dtype), requires_grad=requires_grad)


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(_as_array(x, dtype))


def _make(data, parents, backward, op):
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward, op)
    return Tensor(data, _op=op)


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ------------------------------------------------------------

def add(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "mul")


def div(a, b):
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / b.data**2, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "div")


def power(a, p):
    p = float(p)
    out = a.data**p

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(out, (a,), backward, "pow")


def exp(a):
    out = np.exp(a.data)

    def backward(g):
        return (g * out,)

    return _make(out, (a,), backward, "exp")


def log(a):
    def backward(g):
        return (g / a.data,)

    return _make(np.log(a.data), (a,), backward, "log")


def softplus(a):
    x = a.data
    out = np.logaddexp(0.0, x)

    def backward(g):
        return (g / (1.0 + np.exp(-x)),)

    return _make(out.astype(x.dtype, copy=False), (a,), backward, "softplus")


def leaky_relu(a, slope=0.01):
    x = a.data
    scale = np.where(x > 0, 1.0, slope).astype(x.dtype)
    out = x * scale

    def backward(g):
        return (g * scale,)

    return _make(out, (a,), backward, "leaky_relu")


def stop_gradient(a):
    """Identity in value; the result has no path back to ``a``."""
    return Tensor(a.data.copy())


# -- reductions and shape ---------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "sum")


def mean(a, axis=None, keepdims=False):
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(np.asarray(out).size, 1)

    def backward(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(out), (a,), backward, "mean")


def reshape(a, shape):
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make(out, (a,), backward, "reshape")


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inverse = None if axes is None else np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make(out, (a,), backward, "transpose")


def getitem(a, index):
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "getitem")


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return _make(out, tensors, backward, "concat")


def repeat(a, repeats, axis):
    """Duplicate every slice along ``axis`` ``repeats`` times in place."""
    out = np.repeat(a.data, repeats, axis=axis)

    def backward(g):
        shape = list(a.shape)
        shape.insert(axis + 1, repeats)
        return (g.reshape(shape).sum(axis=axis + 1),)

    return _make(out, (a,), backward, "repeat")


def take_rows(table, index):
    """Row lookup ``table[index]``; gradient scatters back into the table."""
    index = np.asarray(index)
    out = table.data[index]

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(out, (table,), backward, "take_rows")


def matmul(a, b):
    a = _lift(a)
    b = _lift(b)
    out = a.data @ b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2) if b.ndim > 1 else np.multiply.outer(g, b.data)
            ga = _unbroadcast(ga, a.shape)
        if b.requires_grad:
            if a.ndim > 1:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
            else:
                gb = np.multiply.outer(a.data, g)
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


# -- losses -----------------------------------------------------------------

def mse(pred, target, mask=None):
    """Mean squared error; with ``mask`` only unmasked elements are averaged.

    ``mask`` broadcasts against ``pred``. Both operands may require grad.
    """
    target = _lift(target, pred)
    diff = pred.data - target.data
    if mask is None:
        weight = None
        count = diff.size
    else:
        weight = np.broadcast_to(np.asarray(mask, dtype=diff.dtype), diff.shape)
        count = max(float(weight.sum()), 1.0)
    sq = diff * diff if weight is None else weight * diff * diff
    out = np.asarray(sq.sum() / count, dtype=diff.dtype)

    def backward(g):
        base = 2.0 * diff / count if weight is None else 2.0 * weight * diff / count
        base = g * base
        return base, -base

    return _make(out, (pred, target), backward, "mse")


def squared_l2(a, b, axis=-1):
    """Squared Euclidean distance along ``axis``."""
    return tsum(power(sub(a, b), 2.0), axis=axis)


# -- convolutions -----------------------------------------------------------

def _same_pad(length, kernel, stride):
    out_len = -(-length // stride)
    total = max((out_len - 1) * stride + kernel - length, 0)
    left = total // 2
    return left, total - left, out_len


def conv1d(x, w, b=None, stride=1, padding="same"):
    """1D convolution over ``x`` shaped (N, C_in, T) with ``w`` (C_out, C_in, K).

    ``padding='same'`` zero-pads symmetrically (extra sample at the end for
    odd totals) so the output has ceil(T / stride) frames. An integer pads
    that many zeros on both sides.
    """
    n, cin, length = x.shape
    cout, wcin, k = w.shape
    if wcin != cin:
        raise ShapeError(f"conv1d: input has {cin} channels, weight expects {wcin}")
    if padding == "same":
        left, right, _ = _same_pad(length, k, stride)
    else:
        left = right = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (left, right)))
    if xp.shape[2] < k:
        raise ShapeError(f"conv1d: padded length {xp.shape[2]} shorter than kernel {k}")
    win = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    tout = win.shape[2]
    cols = win.transpose(0, 2, 1, 3).reshape(n * tout, cin * k)
    w2 = w.data.reshape(cout, cin * k)
    out = (cols @ w2.T).reshape(n, tout, cout).transpose(0, 2, 1)
    parents = [x, w]
    if b is not None:
        out = out + b.data[None, :, None]
        parents.append(b)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 1).reshape(n * tout, cout)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(n, tout, cin, k)
            gxp = np.zeros_like(xp)
            stop = (tout - 1) * stride + 1
            for j in range(k):
                gxp[:, :, j : j + stop : stride] += gcols[:, :, :, j].transpose(0, 2, 1)
            gx = gxp[:, :, left : left + length]
        if b is not None:
            gb = g.sum(axis=(0, 2))
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _make(out, parents, backward, "conv1d")


def conv_transpose1d(x, w, b=None, stride=1):
    """Fractionally strided 1D convolution producing exactly ``stride * T`` frames.

    ``w`` is (C_in, C_out, K) with K >= stride. The full-length output is
    cropped symmetrically (extra sample off the end) back to ``stride * T``.
    """
    n, cin, length = x.shape
    wcin, cout, k = w.shape
    if wcin != cin:
        raise ShapeError(f"conv_transpose1d: input has {cin} channels, weight expects {wcin}")
    if k < stride:
        raise ShapeError(f"conv_transpose1d: kernel {k} shorter than stride {stride}")
    full_len = (length - 1) * stride + k
    target = length * stride
    crop = full_len - target
    left = crop // 2
    # contributions[n, t, o, j] lands at output position t*stride + j
    xt = x.data.transpose(0, 2, 1).reshape(n * length, cin)
    w2 = w.data.reshape(cin, cout * k)
    contrib = (xt @ w2).reshape(n, length, cout, k)
    full = np.zeros((n, cout, full_len), dtype=contrib.dtype)
    stop = (length - 1) * stride + 1
    for j in range(k):
        full[:, :, j : j + stop : stride] += contrib[:, :, :, j].transpose(0, 2, 1)
    out = full[:, :, left : left + target]
    parents = [x, w]
    if b is not None:
        out = out + b.data[None, :, None]
        parents.append(b)
    out = np.ascontiguousarray(out)

    def backward(g):
        gfull = np.zeros((n, cout, full_len), dtype=g.dtype)
        gfull[:, :, left : left + target] = g
        gcontrib = np.empty((n, length, cout, k), dtype=g.dtype)
        for j in range(k):
            gcontrib[:, :, :, j] = gfull[:, :, j : j + stop : stride].transpose(0, 2, 1)
        gc2 = gcontrib.reshape(n * length, cout * k)
        gx = gw = None
        if x.requires_grad:
            gx = (gc2 @ w2.T).reshape(n, length, cin).transpose(0, 2, 1)
        if w.requires_grad:
            gw = (xt.T @ gc2).reshape(w.shape)
        gb = g.sum(axis=(0, 2)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _make(out, parents, backward, "conv_transpose1d")


def conv2d(x, w, b=None, padding="same"):
    """Stride-1 2D convolution over ``x`` (N, C_in, H, W) with ``w`` (C_out, C_in, KH, KW)."""
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if padding == "same":
        top, bottom, _ = _same_pad(h, kh, 1)
        lft, rgt, _ = _same_pad(wd, kw, 1)
    else:
        top = bottom = lft = rgt = int(padding)
    xp = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (lft, rgt)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
    w2 = w.data.reshape(cout, -1)
    out = (cols @ w2.T).reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    parents = [x, w]
    if b is not None:
        out = out + b.data[None, :, None, None]
        parents.append(b)
    out = np.ascontiguousarray(out)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
        gx = gw = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(w.shape)
        if x.requires_grad:
            gcols = (g2 @ w2).reshape(n, ho, wo, cin, kh, kw)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + ho, j : j + wo] += gcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, top : top + h, lft : lft + wd]
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    return _make(out, parents, backward, "conv2d")


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization over every axis except 1.

    In training mode batch statistics are used and the running buffers
    (plain arrays) are updated in place; otherwise the running statistics
    make this an affine map.
    """
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = [1] * x.ndim
    bshape[1] = x.shape[1]
    if gamma.shape[0] != x.shape[1]:
        raise ShapeError(f"batch_norm: {gamma.shape[0]} channels configured, input has {x.shape[1]}")
    count = x.data.size // x.shape[1]
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        unbiased = var * count / max(count - 1, 1)
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        mu = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    out = out.astype(x.dtype, copy=False)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gamma.data.reshape(bshape)
        if training:
            gx = (
                inv.reshape(bshape)
                / count
                * (
                    count * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            )
        else:
            gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), backward, "batch_norm")
