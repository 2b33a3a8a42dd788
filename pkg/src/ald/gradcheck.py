"""Central finite-difference gradient checks against the autodiff tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward


def numerical_grad(fn: Callable[[], float], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``param.data``.

    ``fn`` is re-evaluated after perturbing ``param.data`` in place; the
    original value is restored afterwards.
    """
    out = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn()
        flat[i] = orig - h
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(max|a|, max|b|, floor)."""
    scale = max(np.max(np.abs(a)), np.max(np.abs(b)), floor)
    return float(np.max(np.abs(a - b)) / scale)


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Largest relative error between tape and finite-difference gradients.

    Args:
        fn: builds a scalar tensor from the current parameter values.
        params: leaves with ``requires_grad=True``.
        h: finite-difference half-step.
    """
    for p in params:
        p.grad = None
    backward(fn())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        gn = numerical_grad(lambda: fn().item(), p, h)
        worst = max(worst, relative_error(ga, gn))
    return worst
