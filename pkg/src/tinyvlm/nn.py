"""Minimal module system and the transformer layers shared by encoder and LM."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, gelu, get_default_dtype, layer_norm, matmul, softmax_rows

INIT_STD = 0.02


class Parameter(Tensor):
    """A trainable leaf tensor owned by a :class:`Module`."""

    def __init__(self, data, dtype=None):
        super().__init__(np.asarray(data, dtype=dtype or get_default_dtype()), requires_grad=True)


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def set_trainable(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def normal(rng: np.random.Generator, *shape: int) -> Parameter:
    return Parameter(rng.normal(0.0, INIT_STD, size=shape))


def zeros(*shape: int) -> Parameter:
    return Parameter(np.zeros(shape))


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = normal(rng, d_in, d_out)
        self.bias = zeros(d_out)

    def forward(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gain = Parameter(np.ones(d))
        self.bias = zeros(d)

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class SelfAttention(Module):
    """Multi-head self-attention over ``[B, L, d]``; ``causal`` masks future keys."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, causal: bool):
        if d % heads:
            raise ValueError(f"embedding dim {d} is not divisible by {heads} heads")
        self.heads = heads
        self.causal = causal
        self.query = Linear(d, d, rng)
        self.key = Linear(d, d, rng)
        self.value = Linear(d, d, rng)
        self.out = Linear(d, d, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, length, d = x.shape
        return x.reshape(b, length, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def forward(self, x: Tensor) -> Tensor:
        b, length, d = x.shape
        q, k, v = self._split(self.query(x)), self._split(self.key(x)), self._split(self.value(x))
        scores = matmul(q, k.swap_last()) * (1.0 / np.sqrt(d // self.heads))
        mask = np.tril(np.ones((length, length), dtype=bool)) if self.causal else None
        attended = matmul(softmax_rows(scores, mask), v)
        return self.out(attended.transpose(0, 2, 1, 3).reshape(b, length, d))


class FeedForward(Module):
    def __init__(self, d: int, hidden: int, rng: np.random.Generator):
        self.up = Linear(d, hidden, rng)
        self.down = Linear(hidden, d, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(gelu(self.up(x)))


class Block(Module):
    """Pre-norm transformer block with residual connections."""

    def __init__(self, d: int, heads: int, mlp_ratio: float, rng: np.random.Generator, causal: bool):
        self.ln1 = LayerNorm(d)
        self.attn = SelfAttention(d, heads, rng, causal)
        self.ln2 = LayerNorm(d)
        self.mlp = FeedForward(d, int(round(d * mlp_ratio)), rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.ln1(x))
        return x + self.mlp(self.ln2(x))
