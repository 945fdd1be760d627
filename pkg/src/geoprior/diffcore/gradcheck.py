from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class EvaluationError(RuntimeError):
    pass


@dataclass
class GradReport:
    tolerance: float
    max_rel_error: dict = field(default_factory=dict)
    passed: dict = field(default_factory=dict)

    @property
    def ok(self):
        return all(self.passed.values())

    @property
    def worst(self):
        return max(self.max_rel_error.values(), default=0.0)

    def __str__(self):
        rows = [f"{k:40s} {v:.3e} {'ok' if self.passed[k] else 'FAIL'}"
                for k, v in self.max_rel_error.items()]
        return "\n".join(rows)


def _eval(f):
    v = float(np.asarray(f().data).reshape(()))
    if not np.isfinite(v):
        raise EvaluationError(f"objective evaluated to {v}")
    return v


def check_gradients(f, store, tolerance=1e-3, names=None, rel_step=1e-4, abs_floor=1e-6):
    """Compare autodiff gradients of ``f()`` against central differences.

    ``f`` takes no arguments and returns a scalar Tensor built from the
    parameters in ``store``. Per coordinate the error is
    ``|g_ad - g_fd| / max(|g_ad|, |g_fd|, abs_floor)`` with step
    ``rel_step * max(1, |theta|)``.
    """
    names = list(store.params) if names is None else list(names)
    store.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise EvaluationError("objective is not finite")
    loss.backward()
    report = GradReport(tolerance)
    for name in names:
        p = store[name]
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        numeric = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            h = rel_step * max(1.0, abs(orig))
            flat[i] = orig + h
            fp = _eval(f)
            flat[i] = orig - h
            fm = _eval(f)
            flat[i] = orig
            numeric[i] = (fp - fm) / (2.0 * h)
        a = analytic.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), abs_floor)
        err = float(np.max(np.abs(a - numeric) / denom)) if flat.size else 0.0
        report.max_rel_error[name] = err
        report.passed[name] = err < tolerance
    store.zero_grad()
    return report
