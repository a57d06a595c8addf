"""Central finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

DEFAULT_STEP = 1e-5
# Gradients smaller than this are compared in absolute rather than relative terms.
REL_FLOOR = 1e-6


def numerical_gradient(loss_fn: Callable[[], Tensor], param: Tensor, h: float = DEFAULT_STEP) -> np.ndarray:
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = loss_fn().item()
        flat[i] = orig - h
        down = loss_fn().item()
        flat[i] = orig
        out[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = REL_FLOOR) -> float:
    """Largest elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    if analytic.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def gradient_errors(loss_fn: Callable[[], Tensor], params: Sequence[Tensor],
                    h: float = DEFAULT_STEP, names: Sequence[str] | None = None) -> dict[str, float]:
    """Backprop once, then compare each parameter's gradient with finite differences."""
    for p in params:
        p.zero_grad()
    loss_fn().backward()
    analytic = [p.grad.copy() for p in params]
    names = list(names) if names is not None else [f"param{i}" for i in range(len(params))]
    return {
        name: relative_error(a, numerical_gradient(loss_fn, p, h))
        for name, p, a in zip(names, params, analytic)
    }


def max_gradient_error(loss_fn, params, h: float = DEFAULT_STEP, names=None) -> float:
    return max(gradient_errors(loss_fn, params, h, names).values(), default=0.0)
