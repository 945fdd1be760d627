from __future__ import annotations

import numpy as np


class ConfigError(ValueError):
    pass


def adamw_step(store, lr, weight_decay=0.01, betas=(0.9, 0.999), eps=1e-8):
    """One decoupled-weight-decay Adam update on every parameter that has a gradient.

    Parameters whose ``grad`` is ``None`` are skipped entirely (no decay, no
    step count), matching the frozen / unreachable contract.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    for name, p in store.params.items():
        if p.grad is None:
            continue
        st = store.state.get(name)
        if st is None:
            st = store.state[name] = {"m": np.zeros_like(p.data), "v": np.zeros_like(p.data), "step": 0}
        g = p.grad
        st["step"] += 1
        t = st["step"]
        p.data = p.data * (1.0 - lr * weight_decay)
        st["m"] = b1 * st["m"] + (1.0 - b1) * g
        st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
        mhat = st["m"] / (1.0 - b1 ** t)
        vhat = st["v"] / (1.0 - b2 ** t)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + eps)
    return store
