"""Reverse-mode autodiff over float64 numpy arrays.

Each op returns a new :class:`Tensor` holding references to its parents and a
closure mapping the output gradient to per-parent gradients. ``backward``
walks the graph in reverse topological order and accumulates gradients on leaf
tensors only (intermediate gradients are discarded after use).
"""
from __future__ import annotations

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class ContractError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    __array_ufunc__ = None  # make ndarray <op> Tensor defer to the Tensor operators

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None):
        backward(self, grad)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss, grad=None):
    """Populate ``.grad`` on every leaf reachable from ``loss``."""
    if grad is None:
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grad = np.ones_like(loss.data)
    if not loss.requires_grad:
        return
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.asarray(grad, dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape),
                            _unbroadcast(g * a.data, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape),
                            _unbroadcast(-g * out / b.data, b.shape)))


def neg(a):
    return _make(-a.data, (a,), lambda g: (-g,))


def power(a, p):
    p = float(p)
    return _make(a.data ** p, (a,), lambda g: (g * p * a.data ** (p - 1),))


def square(a):
    return _make(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def exp(a):
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a):
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def tanh(a):
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a, slope=0.01):
    pos = a.data > 0
    return _make(np.where(pos, a.data, slope * a.data), (a,),
                 lambda g: (np.where(pos, g, slope * g),))


def relu(a):
    return leaky_relu(a, 0.0)


def absolute(a):
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def clip(a, lo=None, hi=None):
    """Clamp values; the gradient is zero wherever the clamp is active."""
    out = np.clip(a.data, lo, hi)
    inside = np.ones(a.shape, dtype=bool)
    if lo is not None:
        inside &= a.data >= lo
    if hi is not None:
        inside &= a.data <= hi
    return _make(out, (a,), lambda g: (np.where(inside, g, 0.0),))


def linear_act(a):
    return a


ACTIVATIONS = {
    "leaky_relu": leaky_relu,
    "relu": relu,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "linear": linear_act,
}


# reductions / shape --------------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(out, (a,), bw)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (a,), lambda g: (np.transpose(g, inv),))


def swapaxes(a, i, j):
    return _make(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),))


def expand_dims(a, axis):
    return reshape(a, np.expand_dims(a.data, axis).shape)


def broadcast_to(a, shape):
    return _make(np.broadcast_to(a.data, shape).copy(), (a,),
                 lambda g: (_unbroadcast(g, a.shape),))


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    edges = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, edges, axis=axis))

    return _make(out, tuple(tensors), bw)


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), bw)


def _is_basic_index(idx):
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, idx):
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def bw(g):
        z = np.zeros(a.shape, dtype=DTYPE)
        if basic:
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _make(out, (a,), bw)


def take_rows(a, idx):
    """``a[idx]`` along axis 0 with a scatter-add backward."""
    idx = np.asarray(idx, dtype=np.intp)
    out = a.data[idx]

    def bw(g):
        z = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(z, idx, g)
        return (z,)

    return _make(out, (a,), bw)


def repeat(a, r, axis=0):
    out = np.repeat(a.data, r, axis=axis)

    def bw(g):
        shp = list(a.shape)
        shp.insert(axis + 1, r)
        return (g.reshape(shp).sum(axis=axis + 1),)

    return _make(out, (a,), bw)


# linear algebra -------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul expects operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def softmax(a, axis=-1):
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), bw)


# segment ops (inputs sorted by segment id) -----------------------------------

def segment_sum(a, seg, n):
    """Sum rows of ``a`` into ``n`` buckets given per-row bucket ids."""
    seg = np.asarray(seg, dtype=np.intp)
    flat = a.data.reshape(len(seg), -1)
    out = np.stack([np.bincount(seg, weights=flat[:, c], minlength=n)
                    for c in range(flat.shape[1])], axis=1)
    out = out.reshape((n,) + a.shape[1:])
    return _make(out, (a,), lambda g: (g[seg],))


def _segment_starts(seg):
    first = np.ones(len(seg), dtype=bool)
    first[1:] = seg[1:] != seg[:-1]
    return np.maximum.accumulate(np.where(first, np.arange(len(seg)), 0))


def _exclusive_cumsum(x, start):
    cs = np.cumsum(x)
    before = cs[start] - x[start]
    return cs - x - before


def segment_exclusive_cumsum(a, seg):
    """Per-segment running sum of the preceding elements (1-D, contiguous segments)."""
    seg = np.asarray(seg)
    start = _segment_starts(seg)
    out = _exclusive_cumsum(a.data, start)
    rseg = seg[::-1]
    rstart = _segment_starts(rseg)

    def bw(g):
        return (_exclusive_cumsum(g[::-1], rstart)[::-1].copy(),)

    return _make(out, (a,), bw)


# 3D convolution, channels-last (D, H, W, C) -----------------------------------

def conv3d(x, w, b=None):
    """Same-padded 3x3x3 (or any odd k) convolution. ``w`` is (k, k, k, Cin, Cout)."""
    x, w = as_tensor(x), as_tensor(w)
    k = w.shape[0]
    if x.shape[-1] != w.shape[3]:
        raise DimensionError(f"conv3d channel mismatch {x.shape} vs {w.shape}")
    p = k // 2
    X, Y, Z, _ = x.shape
    xp = np.pad(x.data, ((p, p), (p, p), (p, p), (0, 0)))
    cout = w.shape[4]
    out = np.zeros((X, Y, Z, cout))
    offs = [(i, j, l) for i in range(k) for j in range(k) for l in range(k)]
    for i, j, l in offs:
        out += xp[i:i + X, j:j + Y, l:l + Z] @ w.data[i, j, l]
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        out += b.data
        parents = (x, w, b)

    def bw(g):
        gx = np.zeros_like(xp) if x.requires_grad else None
        gw = np.zeros_like(w.data) if w.requires_grad else None
        g2 = g.reshape(-1, cout)
        for i, j, l in offs:
            if gw is not None:
                sl = xp[i:i + X, j:j + Y, l:l + Z].reshape(-1, xp.shape[-1])
                gw[i, j, l] = sl.T @ g2
            if gx is not None:
                gx[i:i + X, j:j + Y, l:l + Z] += g @ w.data[i, j, l].T
        if gx is not None:
            gx = gx[p:p + X, p:p + Y, p:p + Z]
        res = [gx, gw]
        if b is not None:
            res.append(g2.sum(axis=0))
        return tuple(res)

    return _make(out, parents, bw)


def avg_pool3d_2(x):
    """2x2x2 average pooling on a (D, H, W, C) volume with even extents."""
    X, Y, Z, C = x.shape
    r = reshape(x, (X // 2, 2, Y // 2, 2, Z // 2, 2, C))
    return mean(transpose(r, (0, 2, 4, 1, 3, 5, 6)).reshape(X // 2, Y // 2, Z // 2, 8, C), axis=3)


def upsample3d_2(x):
    """Nearest-neighbour 2x upsampling on a (D, H, W, C) volume."""
    return repeat(repeat(repeat(x, 2, axis=0), 2, axis=1), 2, axis=2)
