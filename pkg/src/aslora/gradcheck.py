"""Central finite differences against the tape's analytic gradients.

Run these under ``tensor.precision(np.float64)``: in 32-bit the truncation
and rounding errors of the differences swamp a 1e-4 tolerance.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(max |a|, max |b|, floor)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def numeric_grad(loss_fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-6,
                 indices: np.ndarray | None = None) -> np.ndarray:
    """d loss / d param by central differences, perturbing ``param.data`` in place.

    ``indices`` restricts the probe to some flat positions (others stay 0).
    """
    flat = param.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    probe = range(flat.size) if indices is None else indices
    with T.no_grad():
        for i in probe:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn().item()
            flat[i] = orig - eps
            down = loss_fn().item()
            flat[i] = orig
            out[i] = (up - down) / (2 * eps)
    return out.reshape(param.shape)


def analytic_grads(loss_fn: Callable[[], Tensor], params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """One backward pass; returns copies of each param's grad and clears them."""
    for p in params.values():
        p.zero_grad()
    T.reset_tape()
    T.backward(loss_fn())
    grads = {}
    for name, p in params.items():
        grads[name] = np.zeros(p.shape) if p.grad is None else p.grad.astype(np.float64).copy()
        p.zero_grad()
    return grads


def check(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-6,
          max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Relative error per parameter between analytic and numeric gradients.

    With ``max_entries`` only that many random entries of each parameter are
    probed, and the comparison is restricted to them.
    """
    grads = analytic_grads(loss_fn, params)
    rng = np.random.default_rng(seed)
    errors = {}
    for name, p in params.items():
        idx = None
        if max_entries is not None and p.data.size > max_entries:
            idx = np.sort(rng.choice(p.data.size, size=max_entries, replace=False))
        num = numeric_grad(loss_fn, p, eps, idx)
        ana = grads[name]
        if idx is not None:
            num, ana = num.reshape(-1)[idx], ana.reshape(-1)[idx]
        errors[name] = rel_error(ana, num)
    return errors
