"""Closed-vocabulary tokenizer, token embedding and per-identity prompt store."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .nn import Module

BODY_PARTS = ("head", "upper", "lower", "foot")
COLORS = ("black", "white", "red", "blue", "green", "grey")
GARMENTS = {
    "head": ("hair", "hat", "cap"),
    "upper": ("T-shirts", "jacket", "sweater"),
    "lower": ("shorts", "trousers", "skirt"),
    "foot": ("shoes", "boots", "sandals"),
}
TEMPLATE_SUBJECTS = {"man": ("The", "man", "has"), "neutral": ("The", "person", "has")}

MAX_TEXT_LENGTH = 32


class TokenizationError(ValueError):
    pass


class CaptionStructureError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def default_vocabulary() -> list[str]:
    words: list[str] = []
    for subject in TEMPLATE_SUBJECTS.values():
        words.extend(w for w in subject if w not in words)
    words.extend(COLORS)
    for part in BODY_PARTS:
        words.extend(GARMENTS[part])
    words.extend([",", "."])
    return words


class Vocabulary:
    def __init__(self, tokens: Sequence[str] | None = None):
        self.tokens = list(tokens) if tokens is not None else default_vocabulary()
        if len(set(self.tokens)) != len(self.tokens):
            raise ConfigError("vocabulary contains duplicate tokens")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        self.comma_id = self.index.get(",")

    def __len__(self) -> int:
        return len(self.tokens)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([ln for ln in lines if ln])


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    commas: tuple[int, ...] = field(default=())

    @property
    def length(self) -> int:
        return int(self.ids.shape[0])

    @property
    def end(self) -> int:
        return self.length - 1


_WORD = re.compile(r"[^\s,.]+|[,.]")


def tokenize(text: str, vocab: Vocabulary) -> TokenSequence:
    ids = []
    for word in _WORD.findall(text):
        if word not in vocab.index:
            raise TokenizationError(f"out-of-vocabulary word: {word!r}")
        ids.append(vocab.index[word])
    arr = np.array(ids, dtype=np.int64)
    commas = tuple(int(i) for i in np.flatnonzero(arr == vocab.comma_id)) if vocab.comma_id is not None else ()
    return TokenSequence(arr, commas)


def detokenize(seq: TokenSequence, vocab: Vocabulary) -> str:
    out = ""
    for i in seq.ids:
        tok = vocab.tokens[int(i)]
        if out and tok not in (",", "."):
            out += " "
        out += tok
    return out


def part_spans(seq: TokenSequence) -> list[tuple[int, int]]:
    """Half-open token ranges of the four comma-separated caption parts."""
    if len(seq.commas) != 3:
        raise CaptionStructureError(f"expected 3 comma markers, found {len(seq.commas)}")
    bounds = [-1, *seq.commas, seq.length]
    return [(bounds[i] + 1, bounds[i + 1]) for i in range(4)]


class TokenEmbedding(Module):
    """Token table plus learned positional embedding."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator, max_len: int = MAX_TEXT_LENGTH, std: float = 0.02):
        self.table = ag.parameter(rng.normal(0.0, std, (vocab_size, dim)))
        self.position = ag.parameter(rng.normal(0.0, std, (max_len, dim)))

    def __call__(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids, dtype=np.int64)
        length = ids.shape[-1]
        if length == 0:
            raise TokenizationError("cannot embed an empty token sequence")
        if length > self.position.shape[0]:
            raise TokenizationError(f"sequence length {length} exceeds the positional cap {self.position.shape[0]}")
        if ids.min() < 0 or ids.max() >= self.table.shape[0]:
            raise TokenizationError("token id outside the vocabulary range")
        return self.table[ids] + self.position[np.arange(length)]


def embed(tokens: TokenSequence, table: TokenEmbedding) -> Tensor:
    return table(tokens.ids)


class PKPStore(Module):
    """Learnable prompt tokens, one block of ``tokens_per_id`` rows per identity."""

    def __init__(self, dim: int, tokens_per_id: int = 4, std: float = 0.02):
        self.dim = dim
        self.tokens_per_id = tokens_per_id
        self.std = std
        self.identity_ids: list[int] = []
        self.row: dict[int, int] = {}
        self.prompts = ag.parameter(np.zeros((0, tokens_per_id, dim)))

    def __len__(self) -> int:
        return len(self.identity_ids)

    def reinit(self, identity_ids: Sequence[int], rng: np.random.Generator) -> None:
        ids = [int(i) for i in identity_ids]
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate identity ids in prompt store reinitialisation")
        self.identity_ids = ids
        self.row = {pid: i for i, pid in enumerate(ids)}
        self.prompts = ag.parameter(rng.normal(0.0, self.std, (len(ids), self.tokens_per_id, self.dim)))

    def rows_for(self, identity_ids: Sequence[int]) -> np.ndarray:
        try:
            return np.array([self.row[int(i)] for i in identity_ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"identity {exc.args[0]} has no prompt block in the current domain") from None

    def gather(self, identity_ids: Sequence[int]) -> Tensor:
        return self.prompts[self.rows_for(identity_ids)]
