"""Parameter containers and the small set of layers the detector is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autograd import DimensionError, Tensor
from .ops import attention, conv2d, layer_norm, linear

__all__ = [
    "Module",
    "Linear",
    "Conv2d",
    "LayerNorm",
    "MLP",
    "MultiHeadAttention",
    "param",
]


def param(array: np.ndarray) -> Tensor:
    return Tensor(np.array(array, dtype=np.float64), requires_grad=True)


class Module:
    """Attribute-traversing parameter container."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            yield from _walk(value, prefix + name)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise DimensionError(f"state mismatch: missing={missing[:3]} unexpected={unexpected[:3]}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {value.shape} != model shape {p.shape}")
            p.data = value.copy()


def _walk(value, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor):
        if value.requires_grad:
            yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, gain: float = 1.0, zero: bool = False):
        scale = 0.0 if zero else gain * np.sqrt(1.0 / d_in)
        self.weight = param(rng.standard_normal((d_out, d_in)) * scale)
        self.bias = param(np.zeros(d_out))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        gain: float = np.sqrt(2.0),
    ):
        fan_in = c_in * kernel * kernel
        self.weight = param(rng.standard_normal((c_out, c_in, kernel, kernel)) * gain / np.sqrt(fan_in))
        self.bias = param(np.zeros(c_out))
        self.stride = stride
        self.padding = padding
        self.dilation = dilation

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """Stack of linear layers with ReLU between them (not after the last)."""

    def __init__(self, dims: list[int], rng: np.random.Generator, zero_last: bool = False):
        self.layers = [
            Linear(a, b, rng, gain=np.sqrt(2.0), zero=zero_last and i == len(dims) - 2)
            for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))
        ]

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = x.relu()
        return x


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, rng: np.random.Generator, zero_out: bool = False):
        if d % heads:
            raise DimensionError(f"model width {d} not divisible by {heads} heads")
        self.heads = heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng, zero=zero_out)

    def forward(self, query: Tensor, key: Tensor, value: Tensor) -> Tensor:
        ctx = attention(self.q_proj(query), self.k_proj(key), self.v_proj(value), self.heads)
        return self.out_proj(ctx)
