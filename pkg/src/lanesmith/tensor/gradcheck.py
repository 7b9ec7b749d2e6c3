"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .autograd import Tensor


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(np.ravel(a)), np.linalg.norm(np.ravel(b)), 1e-12)
    return float(num / den)


def numerical_grad(fn: Callable[[], Tensor], wrt: Tensor, step: float = 1e-5,
                   indices: np.ndarray | None = None) -> np.ndarray:
    """d fn() / d wrt by central differences; ``fn`` must return a scalar Tensor.

    With ``indices`` (flat positions) only those entries are probed; the rest
    of the returned array is zero.
    """
    grad = np.zeros(wrt.data.size)
    flat = wrt.data.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + step
        plus = fn().item()
        flat[i] = orig - step
        minus = fn().item()
        flat[i] = orig
        grad[i] = (plus - minus) / (2 * step)
    return grad.reshape(wrt.shape)


def check_gradients(fn: Callable[[], Tensor], wrt: list[Tensor], step: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Largest relative error between autodiff and finite differences over ``wrt``."""
    for t in wrt:
        t.grad = None
    out = fn()
    out.backward()
    worst = 0.0
    for t in wrt:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        idx = None
        if max_entries is not None and t.size > max_entries:
            rng = rng or np.random.default_rng(0)
            idx = rng.choice(t.size, size=max_entries, replace=False)
        numeric = numerical_grad(fn, t, step, idx)
        if idx is not None:
            analytic = analytic.reshape(-1)[idx]
            numeric = numeric.reshape(-1)[idx]
        worst = max(worst, relative_error(analytic, numeric))
    return worst
