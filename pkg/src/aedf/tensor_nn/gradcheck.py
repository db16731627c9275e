"""Central finite-difference gradient checking in 64-bit precision."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def probe_indices(size: int, max_coords: int | None, seed: int = 0) -> np.ndarray:
    if max_coords is None or size <= max_coords:
        return np.arange(size)
    return np.sort(np.random.default_rng(seed).choice(size, max_coords, replace=False))


def numeric_grad(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-3,
    max_coords: int | None = None,
) -> list[np.ndarray]:
    """Central differences of scalar ``fn()`` w.r.t. each input's data (mutated in place, restored).

    With ``max_coords`` only a seeded subset of each large input is probed;
    the other entries are NaN.
    """
    grads = []
    for t in inputs:
        g = np.zeros_like(t.data, dtype=np.float64)
        flat = t.data.reshape(-1)
        idx = probe_indices(flat.size, max_coords)
        if idx.size < flat.size:
            g[...] = np.nan
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = fn().item()
            flat[i] = orig - h
            f_minus = fn().item()
            flat[i] = orig
            g.reshape(-1)[i] = (f_plus - f_minus) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(fn: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for t in inputs:
        t.grad = None
    backward(fn())
    return [np.zeros_like(t.data) if t.grad is None else np.array(t.grad, dtype=np.float64) for t in inputs]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """``||a - b|| / max(||a|| + ||b||, 1e-12)`` over entries finite in both."""
    a, b = np.ravel(a), np.ravel(b)
    keep = np.isfinite(a) & np.isfinite(b)
    a, b = a[keep], b[keep]
    num = np.linalg.norm(np.ravel(a) - np.ravel(b))
    den = max(np.linalg.norm(np.ravel(a)) + np.linalg.norm(np.ravel(b)), 1e-12)
    return float(num / den)


def check_gradients(
    fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-3, max_coords: int | None = None
) -> list[float]:
    """Relative error between analytic and numeric gradient, one entry per input."""
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradient checks must run on float64 tensors")
    ana = analytic_grad(fn, inputs)
    num = numeric_grad(fn, inputs, h, max_coords)
    return [relative_error(a, n) for a, n in zip(ana, num)]
