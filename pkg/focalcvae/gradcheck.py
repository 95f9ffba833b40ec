"""Finite-difference gradient checking for tests and debugging."""

import logging
from typing import Callable, Sequence

import numpy as np

from focalcvae.tensor import Tensor

logger = logging.getLogger(__name__)


def numerical_grad(fn: Callable[[], Tensor], target: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``fn()`` with respect to ``target.data``."""
    grad = np.zeros_like(target.data, dtype=np.float64)
    flat = target.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + h
        plus = fn().item()
        flat[i] = saved - h
        minus = fn().item()
        flat[i] = saved
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.linalg.norm(analytic - numeric)
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(diff / scale)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5, tol: float = 1e-5) -> bool:
    """Compare autodiff gradients of ``fn`` against central differences.

    ``fn`` must rebuild its graph from ``inputs`` on every call. Inputs are
    expected in float64.
    """
    for t in inputs:
        t.zero_grad()
    fn().backward()
    ok = True
    for i, t in enumerate(inputs):
        analytic = np.zeros_like(t.data, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64)
        err = relative_error(analytic, numerical_grad(fn, t, h))
        if err > tol:
            logger.warning("gradcheck failed for input %d: relative error %.3e > %.1e", i, err, tol)
            ok = False
    return ok
