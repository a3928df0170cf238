"""Central finite-difference checks for the reverse-mode engine."""
from __future__ import annotations

import logging
import math
from typing import Callable

import numpy as np

from .tensor import Tensor, precision

log = logging.getLogger(__name__)


def numerical_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(x)).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(x)).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-6) -> float:
    """Max relative error between the analytic and numeric gradient of ``f`` at ``x``.

    Runs in float64. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``. A non-finite intermediate yields ``inf``
    so a caller comparing against a threshold sees a failure.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    with precision(np.float64):
        try:
            xt = Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)
            out = f(xt)
            if out.size != 1:
                raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
            if out.requires_grad:
                out.backward()
            analytic = xt.grad if xt.grad is not None else np.zeros_like(xt.data)
            numeric = numerical_gradient(f, xt.data, eps)
        except FloatingPointError as exc:
            log.warning("grad_check hit a non-finite value: %s", exc)
            return math.inf
    if not (np.isfinite(analytic).all() and np.isfinite(numeric).all()):
        return math.inf
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0
