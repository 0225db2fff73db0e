"""Region-sequence image encoder, prompt text encoder and identity classifier."""

from __future__ import annotations

import copy

import numpy as np

from . import autograd as ag
from .autograd import ContractError, ShapeError, Tensor
from .nn import EncoderLayer, LayerNorm, Linear, Module
from .text import CaptionStructureError, TokenSequence, part_spans

N_PARTS = 4


class ImageEncoder(Module):
    def __init__(self, region_dim: int, dim: int, rng: np.random.Generator, layers: int = 2, heads: int = 4):
        if layers < 1:
            raise ValueError("image encoder needs at least one layer")
        self.region_dim = region_dim
        self.proj = Linear(region_dim, dim, rng)
        self.cls = ag.parameter(rng.normal(0.0, 0.02, dim))
        self.position = ag.parameter(rng.normal(0.0, 0.02, (N_PARTS + 1, dim)))
        self.layers = [EncoderLayer(dim, heads, rng) for _ in range(layers)]
        self.layer_part = copy.deepcopy(self.layers[-1])
        self.norm = LayerNorm(dim)

    def hidden(self, regions) -> Tensor:
        """Sequence [cls, head, upper, lower, foot] entering the final layer."""
        x = ag.as_tensor(regions)
        if x.ndim == 2:
            x = x.reshape(1, *x.shape)
        if x.shape[1] != N_PARTS or x.shape[2] != self.region_dim:
            raise ShapeError(f"expected (batch, {N_PARTS}, {self.region_dim}) regions, got {x.shape}")
        b = x.shape[0]
        cls = ag.broadcast_to(self.cls.reshape(1, 1, -1), (b, 1, self.cls.shape[0]))
        seq = ag.concat([cls, self.proj(x)], axis=1) + self.position
        for layer in self.layers[:-1]:
            seq = layer(seq)
        return seq

    def __call__(self, regions) -> tuple[Tensor, Tensor, Tensor]:
        """Return (global feature [B,d], hidden parts [B,4,d], hidden cls [B,d])."""
        seq = self.hidden(regions)
        final = self.layers[-1](seq)
        f_img = self.norm(final[:, 0, :])
        return f_img, seq[:, 1:, :], seq[:, 0, :]


def encode_image(image, encoder: ImageEncoder) -> tuple[Tensor, Tensor]:
    """Single-image convenience: (F_img [d], hidden [4, d])."""
    regions = getattr(image, "regions", image)
    f_img, hidden, _ = encoder(np.asarray(regions) if not isinstance(regions, Tensor) else regions)
    return f_img[0], hidden[0]


def split_image_parts(hidden: Tensor) -> list[Tensor]:
    """Four contiguous equal-length segments along the sequence axis."""
    n = hidden.shape[-2]
    if n % N_PARTS:
        raise ShapeError(f"sequence length {n} is not divisible by {N_PARTS}")
    k = n // N_PARTS
    return [hidden[..., i * k : (i + 1) * k, :] for i in range(N_PARTS)]


def encode_local(segment: Tensor, cls: Tensor, layer: EncoderLayer) -> Tensor:
    """Run ``layer`` over [cls, segment] and return the cls output."""
    if segment.shape[-2] == 0:
        raise ShapeError("empty segment")
    batched = segment.ndim == 3
    if not batched:
        segment = segment.reshape(1, *segment.shape)
        cls = cls.reshape(1, -1)
    seq = ag.concat([cls.reshape(cls.shape[0], 1, cls.shape[-1]), segment], axis=1)
    out = layer(seq)[:, 0, :]
    return out if batched else out[0]


def local_image_features(encoder: ImageEncoder, hidden: Tensor, cls: Tensor) -> Tensor:
    """[B, 4, d] local features from the duplicated final layer."""
    parts = [encode_local(seg, cls, encoder.layer_part) for seg in split_image_parts(hidden)]
    return ag.stack(parts, axis=1)


class TextEncoder(Module):
    def __init__(self, dim: int, rng: np.random.Generator, layers: int = 2, heads: int = 4, max_len: int = 48):
        self.cls = ag.parameter(rng.normal(0.0, 0.02, dim))
        self.position = ag.parameter(rng.normal(0.0, 0.02, (max_len, dim)))
        self.layers = [EncoderLayer(dim, heads, rng) for _ in range(layers)]
        self.norm = LayerNorm(dim)

    def __call__(self, prompt: Tensor) -> tuple[Tensor, Tensor]:
        """Return (global feature [B,d], token states [B, 1+L, d] with cls at row 0)."""
        x = prompt if prompt.ndim == 3 else prompt.reshape(1, *prompt.shape)
        b, n, d = x.shape
        if n + 1 > self.position.shape[0]:
            raise ShapeError(f"prompt of length {n} exceeds text encoder capacity {self.position.shape[0] - 1}")
        cls = ag.broadcast_to(self.cls.reshape(1, 1, d), (b, 1, d))
        seq = ag.concat([cls, x], axis=1) + self.position[: n + 1]
        for layer in self.layers:
            seq = layer(seq)
        seq = self.norm(seq)
        return seq[:, 0, :], seq


def encode_text(prompt: Tensor, encoder: TextEncoder) -> tuple[Tensor, Tensor]:
    f_txt, states = encoder(prompt)
    if prompt.ndim == 2:
        return f_txt[0], states[0]
    return f_txt, states


def split_text_parts(token_states: Tensor, markers: TokenSequence, offset: int = 1) -> Tensor:
    """Mean of (cls state + part token states) for each comma-separated caption part.

    ``offset`` is the row where the caption starts inside ``token_states``
    (row 0 holds the cls state). Returns [..., 4, d].
    """
    if len(markers.commas) != 3:
        raise CaptionStructureError(f"expected 3 comma markers, found {len(markers.commas)}")
    parts = []
    cls = token_states[..., 0:1, :]
    for start, stop in part_spans(markers):
        group = ag.concat([cls, token_states[..., offset + start : offset + stop, :]], axis=-2)
        parts.append(group.mean(axis=-2))
    return ag.stack(parts, axis=-2)


class ClassifierHead(Linear):
    def __init__(self, dim: int, n_classes: int, rng: np.random.Generator):
        super().__init__(dim, n_classes, rng, std=0.02)
        self.n_classes = n_classes


def classify(f_img: Tensor, head: ClassifierHead, n_identities: int | None = None) -> Tensor:
    if n_identities is not None and n_identities != head.n_classes:
        raise ContractError(f"classifier head has {head.n_classes} classes but the domain has {n_identities} identities")
    return head(f_img)
