"""Parameters, initialisation and MLP blocks."""
from __future__ import annotations

import hashlib

import numpy as np

from .tensor import ACTIVATIONS, DimensionError, Tensor, matmul


class ParamStore:
    """Named collection of leaf tensors plus per-parameter optimizer state."""

    def __init__(self, seed=0):
        self.params: dict[str, Tensor] = {}
        self.state: dict[str, dict] = {}
        self.rng = np.random.default_rng(seed)

    def __contains__(self, name):
        return name in self.params

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter id {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def uniform(self, name, shape, fan_in):
        bound = 1.0 / np.sqrt(max(fan_in, 1))
        return self.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name, shape):
        return self.add(name, np.zeros(shape))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_values(self):
        return sum(p.size for p in self.params.values())

    def subset(self, prefix):
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def digest(self, prefix=""):
        """SHA-256 over parameter names, shapes and raw bytes."""
        h = hashlib.sha256()
        for k in sorted(self.params):
            if not k.startswith(prefix):
                continue
            v = self.params[k].data
            h.update(k.encode())
            h.update(np.asarray(v.shape, dtype=np.int64).tobytes())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()

    def snapshot(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load(self, values, strict=True):
        for k, v in values.items():
            if k not in self.params:
                if strict:
                    raise KeyError(f"unknown parameter {k!r}")
                continue
            if self.params[k].shape != np.shape(v):
                raise DimensionError(f"{k}: shape {np.shape(v)} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)
        if strict:
            missing = set(self.params) - set(values)
            if missing:
                raise KeyError(f"missing parameters {sorted(missing)[:5]}")


class Linear:
    def __init__(self, store, name, din, dout, zero=False):
        self.din, self.dout = din, dout
        self.W = store.zeros(f"{name}.W", (din, dout)) if zero else store.uniform(f"{name}.W", (din, dout), din)
        self.b = store.zeros(f"{name}.b", (dout,))

    def __call__(self, x):
        if x.shape[-1] != self.din:
            raise DimensionError(f"expected trailing dim {self.din}, got {x.shape}")
        return matmul(x, self.W) + self.b


class MlpBlock:
    """Stack of linear layers with an activation between them.

    With ``residual=True`` the block computes ``x + f(x)``, which requires the
    first and last widths to agree. ``zero_last`` zero-initialises the final
    layer, so a residual block starts as the identity map.
    """

    def __init__(self, store, name, widths, activation="leaky_relu", residual=False,
                 zero_last=False):
        widths = list(widths)
        if len(widths) < 2:
            raise DimensionError("MlpBlock needs at least an input and an output width")
        if residual and widths[0] != widths[-1]:
            raise DimensionError("residual MlpBlock needs equal in/out widths")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self.residual = residual
        n = len(widths) - 1
        self.layers = [Linear(store, f"{name}.{i}", widths[i], widths[i + 1],
                              zero=zero_last and i == n - 1) for i in range(n)]

    @property
    def din(self):
        return self.widths[0]

    @property
    def dout(self):
        return self.widths[-1]

    def __call__(self, x):
        return forward_mlp(self, x)


def forward_mlp(block, x):
    if x.shape[-1] != block.din:
        raise DimensionError(f"MlpBlock expects width {block.din}, got {x.shape}")
    act = ACTIVATIONS[block.activation]
    h = x
    for i, layer in enumerate(block.layers):
        h = layer(h)
        if i < len(block.layers) - 1:
            h = act(h)
    return x + h if block.residual else h


class ResNetFC:
    """Input projection, residual MLP blocks, output projection."""

    def __init__(self, store, name, din, dout, hidden=64, blocks=2, activation="leaky_relu",
                 zero_out=False):
        self.proj_in = Linear(store, f"{name}.in", din, hidden)
        self.blocks = [MlpBlock(store, f"{name}.blk{i}", [hidden, hidden, hidden],
                                activation, residual=True) for i in range(blocks)]
        self.proj_out = Linear(store, f"{name}.out", hidden, dout, zero=zero_out)
        self.act = ACTIVATIONS[activation]
        self.din, self.dout = din, dout

    def __call__(self, x):
        h = self.proj_in(x)
        for blk in self.blocks:
            h = blk(h)
        return self.proj_out(self.act(h))
