"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, eps: float = 1e-5,
                   entries: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to selected flat entries of ``t``."""
    flat = t.data.reshape(-1)
    idx = np.arange(flat.size) if entries is None else entries
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        up = fn().item()
        flat[i] = orig - eps
        down = fn().item()
        flat[i] = orig
        out[n] = (up - down) / (2 * eps)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
                    max_entries: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Worst relative error between autodiff and finite differences over ``params``.

    ``fn`` must rebuild the graph on every call.  With ``max_entries`` only a
    random subset of each parameter's entries is probed.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    fn().backward()
    worst = 0.0
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors")
        n = p.data.size
        entries = None
        if max_entries is not None and n > max_entries:
            entries = np.sort(rng.choice(n, size=max_entries, replace=False))
        analytic = p.grad.reshape(-1) if entries is None else p.grad.reshape(-1)[entries]
        numeric = numerical_grad(fn, p, eps, entries)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
