"""Finite-difference suite covering every registered differentiable op.

Each case builds a scalar function of one input by contracting the op's
output with a fixed random tensor, so no coordinate of the gradient is
structurally zero. Inputs are drawn away from kinks (ReLU at 0, pooling
ties, integer bilinear sample positions) so the function is
differentiable at the probe point.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import spatial
from .autodiff import Tensor, grad_check

THRESHOLD = 1e-4
EPS = 1e-5

Case = tuple[str, Callable[[Tensor], Tensor], np.ndarray]


def _away_from_zero(rng, shape, gap=0.05):
    u = rng.normal(size=shape)
    return np.sign(u) * (gap + np.abs(u))


def _binary(op):
    def build(rng):
        shape = tuple(rng.integers(2, 5, size=2))
        a, b = rng.normal(size=shape), rng.normal(size=shape)
        r = rng.normal(size=shape)
        if op is ad.div:
            b = _away_from_zero(rng, shape, 0.5)
        return [
            ("a", lambda x: (op(x, Tensor(b)) * Tensor(r)).sum(), a),
            ("b", lambda x: (op(Tensor(a), x) * Tensor(r)).sum(), b),
        ]
    return build


def _broadcast_add(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    r = rng.normal(size=(3, 4))
    return [("row-broadcast", lambda x: (ad.add(Tensor(a), x) * Tensor(r)).sum(), b)]


def _unary(fn, positive=False, kinked=False):
    def build(rng):
        shape = tuple(rng.integers(2, 5, size=2))
        if positive:
            x = rng.uniform(0.3, 2.0, size=shape)
        elif kinked:
            x = _away_from_zero(rng, shape)
        else:
            x = rng.normal(size=shape)
        r = rng.normal(size=shape)
        return [("x", lambda t: (fn(t) * Tensor(r)).sum(), x)]
    return build


def _matmul(rng):
    m, k, n = rng.integers(2, 5, size=3)
    a, b = rng.normal(size=(m, k)), rng.normal(size=(k, n))
    r = rng.normal(size=(m, n))
    return [
        ("a", lambda x: (x @ Tensor(b) * Tensor(r)).sum(), a),
        ("b", lambda x: (Tensor(a) @ x * Tensor(r)).sum(), b),
    ]


def _batched_matmul(rng):
    a, b = rng.normal(size=(2, 2, 3)), rng.normal(size=(3, 2))
    r = rng.normal(size=(2, 2, 2))
    return [("broadcast-b", lambda x: (Tensor(a) @ x * Tensor(r)).sum(), b)]


def _reduction(fn):
    def build(rng):
        x = rng.normal(size=(3, 4))
        axis = int(rng.integers(0, 2))
        r = rng.normal(size=(3, 4)[1 - axis])
        return [(f"axis{axis}", lambda t: (fn(t, axis) * Tensor(r)).sum(), x),
                ("all", lambda t: fn(t, None) * 1.7, x)]
    return build


def _reshape(rng):
    x = rng.normal(size=(2, 6))
    r = rng.normal(size=(3, 4))
    return [("x", lambda t: (t.reshape(3, 4) * Tensor(r)).sum(), x)]


def _transpose(rng):
    x = rng.normal(size=(2, 3, 2))
    r = rng.normal(size=(2, 2, 3))
    return [("x", lambda t: (t.transpose(2, 0, 1) * Tensor(r)).sum(), x)]


def _concatenate(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
    r = rng.normal(size=(2, 5))
    return [("first", lambda t: (ad.concatenate([t, Tensor(b)], axis=1) * Tensor(r)).sum(), a),
            ("second", lambda t: (ad.concatenate([Tensor(a), t], axis=1) * Tensor(r)).sum(), b)]


def _slice(rng):
    x = rng.normal(size=(4, 4))
    r = rng.normal(size=(2, 3))
    return [("x", lambda t: (t[1:3, 0:3] * Tensor(r)).sum(), x)]


def _softmax(fn):
    def build(rng):
        x = rng.normal(size=(2, 5))
        r = rng.normal(size=(2, 5))
        return [("x", lambda t: (fn(t, -1) * Tensor(r)).sum(), x)]
    return build


def _conv2d(rng):
    stride = int(rng.integers(1, 3))
    x, w, b = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(2, 2, 2, 2)), rng.normal(size=2)
    f = lambda xx, ww, bb: ad.conv2d(xx, ww, bb, stride=stride, padding=1)
    r = rng.normal(size=f(Tensor(x), Tensor(w), Tensor(b)).shape)
    return [
        ("input", lambda t: (f(t, Tensor(w), Tensor(b)) * Tensor(r)).sum(), x),
        ("weight", lambda t: (f(Tensor(x), t, Tensor(b)) * Tensor(r)).sum(), w),
        ("bias", lambda t: (f(Tensor(x), Tensor(w), t) * Tensor(r)).sum(), b),
    ]


def _conv_transpose2d(rng):
    x, w, b = rng.normal(size=(1, 2, 3, 3)), rng.normal(size=(2, 2, 2, 2)), rng.normal(size=2)
    f = lambda xx, ww, bb: ad.conv_transpose2d(xx, ww, bb, stride=2, padding=1)
    r = rng.normal(size=f(Tensor(x), Tensor(w), Tensor(b)).shape)
    return [
        ("input", lambda t: (f(t, Tensor(w), Tensor(b)) * Tensor(r)).sum(), x),
        ("weight", lambda t: (f(Tensor(x), t, Tensor(b)) * Tensor(r)).sum(), w),
        ("bias", lambda t: (f(Tensor(x), Tensor(w), t) * Tensor(r)).sum(), b),
    ]


def _pool(fn):
    def build(rng):
        # distinct, well-separated values so max-pool has no ties within eps
        x = (rng.permutation(16).reshape(1, 1, 4, 4) * 0.1 + rng.uniform(0, 0.02, (1, 1, 4, 4)))
        r = rng.normal(size=(1, 1, 2, 2))
        return [("x", lambda t: (fn(t, 2) * Tensor(r)).sum(), x)]
    return build


def _instance_norm(rng):
    x = rng.normal(size=(1, 2, 2, 3))
    wgt, bias = rng.normal(size=2), rng.normal(size=2)
    r = rng.normal(size=x.shape)
    return [
        ("input", lambda t: (ad.instance_norm(t, Tensor(wgt), Tensor(bias)) * Tensor(r)).sum(), x),
        ("weight", lambda t: (ad.instance_norm(Tensor(x), t, Tensor(bias)) * Tensor(r)).sum(), wgt),
    ]


def _layer_norm(rng):
    x = rng.normal(size=(3, 5))
    wgt, bias = rng.normal(size=5), rng.normal(size=5)
    r = rng.normal(size=x.shape)
    return [
        ("input", lambda t: (ad.layer_norm(t, Tensor(wgt), Tensor(bias)) * Tensor(r)).sum(), x),
        ("bias", lambda t: (ad.layer_norm(Tensor(x), Tensor(wgt), t) * Tensor(r)).sum(), bias),
    ]


def _affine_grid(rng):
    theta = spatial.IDENTITY[None] + rng.normal(0, 0.2, size=(2, 6))
    r = rng.normal(size=(2, 3, 2, 2))
    return [("theta", lambda t: (spatial.affine_grid(t, (2, 1, 3, 2)) * Tensor(r)).sum(), theta)]


def _safe_grid(rng, shape, h, w):
    """Grid whose pixel positions keep >= 0.02 px from integer (floor) boundaries."""
    grid = rng.uniform(-1.1, 1.1, size=shape)
    px = ((grid[..., 0] + 1) * w - 1) / 2
    py = ((grid[..., 1] + 1) * h - 1) / 2
    for p, size in ((px, w), (py, h)):
        frac = p - np.floor(p)
        p += np.where(frac < 0.02, 0.05, 0) - np.where(frac > 0.98, 0.05, 0)
    return np.stack([(2 * px + 1) / w - 1, (2 * py + 1) / h - 1], axis=-1)


def _grid_sample(rng):
    img = rng.random((1, 2, 3, 4))
    grid = _safe_grid(rng, (1, 2, 3, 2), 3, 4)
    r = rng.normal(size=(1, 2, 2, 3))
    return [
        ("image", lambda t: (spatial.grid_sample_bilinear(t, Tensor(grid)) * Tensor(r)).sum(), img),
        ("grid", lambda t: (spatial.grid_sample_bilinear(Tensor(img), t) * Tensor(r)).sum(), grid),
    ]


def _linear(rng):
    x, w, b = rng.normal(size=(3, 4)), rng.normal(size=(2, 4)), rng.normal(size=2)
    r = rng.normal(size=(3, 2))
    return [("weight", lambda t: (ad.linear(Tensor(x), t, Tensor(b)) * Tensor(r)).sum(), w)]


REGISTRY: dict[str, Callable[[np.random.Generator], list[Case]]] = {
    "add": _binary(ad.add),
    "add-broadcast": _broadcast_add,
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "div": _binary(ad.div),
    "neg": _unary(ad.neg),
    "pow": _unary(lambda t: ad.power(t, 3.0), kinked=True),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, positive=True),
    "sqrt": _unary(ad.sqrt, positive=True),
    "abs": _unary(ad.absolute, kinked=True),
    "relu": _unary(ad.relu, kinked=True),
    "leaky_relu": _unary(lambda t: ad.leaky_relu(t, 0.2), kinked=True),
    "sigmoid": _unary(ad.sigmoid),
    "tanh": _unary(ad.tanh),
    "softmax": _softmax(ad.softmax),
    "log_softmax": _softmax(ad.log_softmax),
    "matmul": _matmul,
    "matmul-batched": _batched_matmul,
    "linear": _linear,
    "sum": _reduction(ad.tsum),
    "mean": _reduction(ad.mean),
    "reshape": _reshape,
    "transpose": _transpose,
    "concatenate": _concatenate,
    "slice": _slice,
    "conv2d": _conv2d,
    "conv_transpose2d": _conv_transpose2d,
    "avg_pool2d": _pool(ad.avg_pool2d),
    "max_pool2d": _pool(ad.max_pool2d),
    "instance_norm": _instance_norm,
    "layer_norm": _layer_norm,
    "affine_grid": _affine_grid,
    "grid_sample": _grid_sample,
}

# registry entry -> tape op name, for the corruption hook
TAPE_OP = {name: name.split("-")[0] for name in REGISTRY}
TAPE_OP.update({"linear": "matmul", "affine_grid": "matmul", "sum": "sum"})


@dataclass
class SuiteResult:
    worst: dict[str, float] = field(default_factory=dict)
    seeds: int = 0
    seconds: float = 0.0
    threshold: float = THRESHOLD

    @property
    def failures(self) -> list[str]:
        return [op for op, err in self.worst.items() if not err < self.threshold]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def worst_op(self) -> tuple[str, float]:
        op = max(self.worst, key=self.worst.get)
        return op, self.worst[op]


def run_suite(seeds: int = 100, ops=None, threshold: float = THRESHOLD, eps: float = EPS) -> SuiteResult:
    """Check every registered op (or ``ops``) for ``seeds`` random draws in float64."""
    names = list(REGISTRY) if ops is None else list(ops)
    unknown = [n for n in names if n not in REGISTRY]
    if unknown:
        raise KeyError(f"unregistered ops: {unknown}")
    result = SuiteResult(seeds=seeds, threshold=threshold)
    start = time.perf_counter()
    with ad.precision(np.float64):
        for name in names:
            worst = 0.0
            for seed in range(seeds):
                rng = np.random.default_rng([seed, len(name), sum(map(ord, name))])
                for _, f, x in REGISTRY[name](rng):
                    worst = max(worst, grad_check(f, x, eps))
            result.worst[name] = worst
    result.seconds = time.perf_counter() - start
    return result
