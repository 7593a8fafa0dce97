"""Central finite-difference gradient checking in float64."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from rankseg.ndarr.tensor import Tensor, shadow64


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, h: float = 1e-3) -> np.ndarray:
    """d fn() / d t by central differences; ``fn`` must return a scalar."""
    grad = np.zeros_like(t.data, dtype=np.float64)
    flat = t.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        grad.reshape(-1)[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| / max(|a|, |n|, 1e-8), taken over all elements."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(
    fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3
) -> list[float]:
    """Compare autodiff with central differences for every input of ``fn``.

    ``fn`` receives one float64 :class:`Tensor` per input array and must return
    a scalar tensor. Returns the relative error per input.
    """
    with shadow64():
        tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
        fn(*tensors).backward()
        errors = []
        for t in tensors:
            analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
            numeric = numerical_grad(lambda: fn(*tensors), t, h)
            errors.append(relative_error(analytic, numeric))
    return errors
