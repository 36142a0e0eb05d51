from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor, dropout, gelu, get_default_dtype, layer_norm, linear, matmul, softmax


class Parameter(Tensor):
    """A leaf tensor that the optimizer updates."""

    def __init__(self, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype or get_default_dtype()), requires_grad=True)


class Module:
    """Container that discovers parameters and submodules from its attributes.

    Parameter paths follow attribute names, e.g. ``blocks.0.mix.cross.q.weight``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = own.keys() - state.keys()
        unexpected = state.keys() - own.keys()
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def uniform_fan_in(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(uniform_fan_in(rng, n_in, (n_in, n_out)))
        self.bias = Parameter(uniform_fan_in(rng, n_in, (n_out,))) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Two-layer GELU feed-forward map."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, out: int | None = None):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, out or dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class MultiHeadAttention(Module):
    """Scaled dot-product attention over the second-to-last axis.

    All leading axes are independent. ``key_mask`` is a keep-mask with the
    shape of ``kv`` minus its feature axis.
    """

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator):
        if dim % n_heads:
            raise ValueError(f"embedding dim {dim} is not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        *lead, n, d = x.shape
        return x.reshape(*lead, n, self.n_heads, d // self.n_heads).transpose(-3, -2)

    def __call__(self, q: Tensor, kv: Tensor, key_mask=None, drop: float = 0.0,
                 train: bool = False, key=None) -> Tensor:
        *lead, n_q, d = q.shape
        head_dim = d // self.n_heads
        qh = self._split(self.q(q))
        kh = self._split(self.k(kv))
        vh = self._split(self.v(kv))
        scores = matmul(qh, kh.transpose(-1, -2)) * (1.0 / math.sqrt(head_dim))
        mask = None
        if key_mask is not None:
            mask = np.asarray(key_mask, dtype=bool)[..., None, None, :]
        attn = softmax(scores, mask)
        attn = dropout(attn, drop, train, key)
        out = matmul(attn, vh).transpose(-3, -2).reshape(*lead, n_q, d)
        return self.o(out)

