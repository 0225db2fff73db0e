"""Parameter containers and transformer building blocks."""

from __future__ import annotations

import copy

import numpy as np

from . import autograd as ag
from .autograd import Tensor


class Module:
    """Collects parameters from attributes, recursing into submodules and lists."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor):
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def trainable(self, prefix: str = "") -> dict[str, Tensor]:
        return {k: v for k, v in self.named_parameters(prefix).items() if v.requires_grad}

    def freeze(self):
        for p in self.parameters():
            p.requires_grad = False
            p.grad = None
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ag.ShapeError(f"{k}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def clone(self):
        """Deep copy with no gradient state attached."""
        twin = copy.deepcopy(self)
        twin.zero_grad()
        return twin


def _normal(rng: np.random.Generator, shape, std: float) -> Tensor:
    return ag.parameter(rng.normal(0.0, std, size=shape))


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, std: float | None = None):
        self.weight = _normal(rng, (n_in, n_out), std if std is not None else n_in**-0.5)
        self.bias = ag.parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.weight = ag.parameter(np.ones(dim))
        self.bias = ag.parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return ag.layer_norm(x, self.weight, self.bias)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng)

    def _split(self, x: Tensor) -> Tensor:
        b, n, d = x.shape
        return x.reshape(b, n, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, query: Tensor, memory: Tensor) -> Tensor:
        b, n, d = query.shape
        q = self._split(self.q(query))
        k = self._split(self.k(memory))
        v = self._split(self.v(memory))
        scores = (q @ ag.swap_last(k)) * (1.0 / np.sqrt(d // self.heads))
        attn = ag.softmax(scores, axis=-1)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.out(ctx)

    def zero_projections(self) -> None:
        for lin in (self.q, self.k, self.v, self.out):
            lin.weight.data[...] = 0.0
            lin.bias.data[...] = 0.0


class FeedForward(Module):
    def __init__(self, dim: int, expansion: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, dim * expansion, rng)
        self.fc2 = Linear(dim * expansion, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ag.gelu(self.fc1(x)))


class EncoderLayer(Module):
    """Pre-norm self-attention block."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, expansion: int = 2):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ff = FeedForward(dim, expansion, rng)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h)
        return x + self.ff(self.ln2(x))


class DecoderLayer(Module):
    """Pre-norm block: self-attention over queries, cross-attention to memory, feed-forward."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, expansion: int = 2):
        self.ln1 = LayerNorm(dim)
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.ln3 = LayerNorm(dim)
        self.ff = FeedForward(dim, expansion, rng)

    def __call__(self, x: Tensor, memory: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.self_attn(h, h)
        x = x + self.cross_attn(self.ln2(x), memory)
        return x + self.ff(self.ln3(x))
