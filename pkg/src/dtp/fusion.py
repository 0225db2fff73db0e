"""Fusion of invariant caption prompts with per-identity learnable prompts."""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import autograd as ag
from .autograd import ShapeError, Tensor
from .nn import DecoderLayer, EncoderLayer, LayerNorm, Module


class FusionMode(str, Enum):
    DYNAMIC = "dynamic"
    ADDITION = "addition"
    CONCAT = "concat"


class FusionBlock(Module):
    """Encoder over the caption tokens and a decoder whose queries are the identity prompts."""

    def __init__(self, dim: int, rng: np.random.Generator, heads: int = 4, encoder_layers: int = 2, decoder_layers: int = 2, expansion: int = 2):
        self.encoder = [EncoderLayer(dim, heads, rng, expansion) for _ in range(encoder_layers)]
        self.encoder_norm = LayerNorm(dim)
        self.decoder = [DecoderLayer(dim, heads, rng, expansion) for _ in range(decoder_layers)]

    def encode(self, ip: Tensor) -> Tensor:
        x = ip
        for layer in self.encoder:
            x = layer(x)
        return self.encoder_norm(x)

    def decode(self, queries: Tensor, memory: Tensor) -> Tensor:
        x = queries
        for layer in self.decoder:
            x = layer(x, memory)
        return x

    def zero_attention(self) -> None:
        for layer in self.decoder:
            layer.self_attn.zero_projections()
            layer.cross_attn.zero_projections()


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return x.reshape(1, *x.shape), True
    return x, False


def _check(ip: Tensor, pkp: Tensor) -> None:
    if ip.shape[-1] != pkp.shape[-1]:
        raise ShapeError(f"prompt widths differ: {ip.shape} vs {pkp.shape}")
    if ip.shape[-2] == 0 or pkp.shape[-2] == 0:
        raise ShapeError("empty prompt")


def fuse(ip: Tensor, pkp: Tensor, block: FusionBlock) -> Tensor:
    """Dynamic prompt: decoder(queries=pkp, memory=encoder(ip)); output has pkp's length."""
    _check(ip, pkp)
    ip, squeeze = _batched(ip)
    pkp, _ = _batched(pkp)
    out = block.decode(pkp, block.encode(ip))
    return out.reshape(out.shape[1:]) if squeeze else out


def fuse_addition(ip: Tensor, pkp: Tensor) -> Tensor:
    """Element-wise sum after truncating or zero-padding ip to pkp's length."""
    _check(ip, pkp)
    n = pkp.shape[-2]
    m = ip.shape[-2]
    if m >= n:
        ip = ip[..., :n, :]
    else:
        pad = ag.Tensor(np.zeros(ip.shape[:-2] + (n - m, ip.shape[-1])))
        ip = ag.concat([ip, pad], axis=-2)
    return ip + pkp


def fuse_concat(ip: Tensor, pkp: Tensor) -> Tensor:
    """Concatenate along the sequence and mean-pool into pkp's number of slots."""
    _check(ip, pkp)
    slots = pkp.shape[-2]
    joined = ag.concat([ip, pkp], axis=-2)
    chunks = np.array_split(np.arange(joined.shape[-2]), slots)
    pooled = [joined[..., c[0] : c[-1] + 1, :].mean(axis=-2, keepdims=True) for c in chunks]
    return ag.concat(pooled, axis=-2)


def fuse_prompts(ip: Tensor, pkp: Tensor, mode: FusionMode | str, block: FusionBlock | None = None) -> Tensor:
    mode = FusionMode(mode)
    if mode is FusionMode.DYNAMIC:
        if block is None:
            raise ValueError("dynamic fusion needs a FusionBlock")
        return fuse(ip, pkp, block)
    if mode is FusionMode.ADDITION:
        return fuse_addition(ip, pkp)
    return fuse_concat(ip, pkp)
