"""Central finite-difference gradient checks."""
from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(f: Callable[[], Tensor], t: Tensor, h: float = 1e-5, index=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``t`` (all, or flat ``index``)."""
    flat = t.data.reshape(-1)
    idx = np.arange(flat.size) if index is None else np.asarray(index)
    out = np.zeros(idx.size)
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + h
        fp = f().item()
        flat[i] = old - h
        fm = f().item()
        flat[i] = old
        out[k] = (fp - fm) / (2 * h)
    return out


def check_gradients(f: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
                    max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Relative error per tensor between backprop and finite differences.

    The error is ``max|analytic - numeric| / max(max|numeric|, 1e-12)`` over the
    checked entries.  With ``max_entries`` large tensors are sampled.
    """
    for p in params.values():
        p.grad = None
    backward(f())
    rng = np.random.default_rng(seed)
    errs = {}
    for name, p in params.items():
        analytic = np.zeros(p.size) if p.grad is None else p.grad.reshape(-1).astype(np.float64)
        index = None
        if max_entries is not None and p.size > max_entries:
            index = np.sort(rng.choice(p.size, size=max_entries, replace=False))
            analytic = analytic[index]
        numeric = numerical_grad(f, p, h, index)
        scale = max(np.abs(numeric).max(initial=0.0), 1e-12)
        errs[name] = float(np.abs(analytic - numeric).max(initial=0.0) / scale)
    return errs
