"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], index: int, h: float = 1e-4) -> np.ndarray:
    """d fn / d arrays[index] by central differences, evaluated in float64."""
    base = [np.array(a, dtype=np.float64, order="C") for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    flat, gflat = target.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        plus = fn(*[Tensor(a) for a in base]).item()
        flat[i] = orig - h
        minus = fn(*[Tensor(a) for a in base]).item()
        flat[i] = orig
        gflat[i] = (plus - minus) / (2 * h)
    return grad


def analytic_grads(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list:
    ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    loss = fn(*ts)
    return backward(loss, ts)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor), maximized."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], wrt: Sequence[int] = None,
          h: float = 1e-4, floor: float = 1e-6) -> list:
    """Max relative error for each input in ``wrt`` (all inputs by default)."""
    wrt = range(len(arrays)) if wrt is None else wrt
    grads = analytic_grads(fn, arrays)
    return [max_relative_error(grads[i], numeric_grad(fn, arrays, i, h), floor) for i in wrt]
