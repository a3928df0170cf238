from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


@dataclass
class OptimState:
    """Adam moment buffers plus hyperparameters for one parameter group."""

    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        for name in ("lr", "beta1", "beta2", "eps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"Adam {name} must be positive, got {getattr(self, name)}")


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: OptimState) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place.

    Missing gradients (``None``) are treated as zeros, which leaves the
    parameter untouched on the first step.
    """
    if len(params) != len(grads):
        raise ValueError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ValueError("adam_step: optimizer state was built for a different parameter list")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {g.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype, copy=False)


class Adam:
    """Thin stateful wrapper binding ``adam_step`` to a list of tensors."""

    def __init__(self, params: Sequence[Tensor], lr=2e-4, betas=(0.5, 0.999), eps=1e-8):
        self.params = list(params)
        self.state = OptimState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)
