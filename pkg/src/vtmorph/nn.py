"""Parameter containers and layers built on the autodiff engine."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Parameter(Tensor):
    def __init__(self, data):
        super().__init__(data, requires_grad=True)


class Module:
    """Minimal module base: attribute-order parameter discovery and state dicts."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        params = dict(self.named_parameters())
        missing = [k for k in params if prefix + k not in state]
        if missing:
            raise KeyError(f"state dict is missing parameters: {missing[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[prefix + k])
            if arr.shape != p.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()


def _dtype():
    return ad.get_default_dtype()


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, std: float | None = None):
        self.in_features = in_features
        self.out_features = out_features
        if std is None:
            bound = 1.0 / np.sqrt(in_features)
            w = rng.uniform(-bound, bound, (out_features, in_features))
        else:
            w = rng.normal(0.0, std, (out_features, in_features))
        self.weight = Parameter(w.astype(_dtype()))
        self.bias = Parameter(np.zeros(out_features, dtype=_dtype()))

    def forward(self, x):
        return ad.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, padding=0, rng=None, std=0.02, bias=True):
        self.stride, self.padding = stride, padding
        self.weight = Parameter(rng.normal(0.0, std, (cout, cin, kernel, kernel)).astype(_dtype()))
        self.bias = Parameter(np.zeros(cout, dtype=_dtype())) if bias else None

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, kernel, stride=1, padding=0, rng=None, std=0.02, bias=True):
        self.stride, self.padding = stride, padding
        self.weight = Parameter(rng.normal(0.0, std, (cin, cout, kernel, kernel)).astype(_dtype()))
        self.bias = Parameter(np.zeros(cout, dtype=_dtype())) if bias else None

    def forward(self, x):
        return ad.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class InstanceNorm2d(Module):
    def __init__(self, channels: int):
        self.weight = Parameter(np.ones(channels, dtype=_dtype()))
        self.bias = Parameter(np.zeros(channels, dtype=_dtype()))

    def forward(self, x):
        return ad.instance_norm(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = Parameter(np.ones(dim, dtype=_dtype()))
        self.bias = Parameter(np.zeros(dim, dtype=_dtype()))

    def forward(self, x):
        return ad.layer_norm(x, self.weight, self.bias)
