"""The full prompt-guided retrieval model and its frozen teacher snapshot."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import ModelConfig, Toggles
from .encoders import ClassifierHead, ImageEncoder, TextEncoder, local_image_features, split_text_parts
from .fusion import FusionBlock, FusionMode, fuse_prompts
from .nn import Module
from .text import CaptionStructureError, PKPStore, TokenEmbedding, TokenSequence, Vocabulary, tokenize


class DTPModel(Module):
    def __init__(self, cfg: ModelConfig, region_dim: int, vocab: Vocabulary, rng: np.random.Generator, logit_scale: float = 0.0):
        self.cfg = cfg
        self.vocab = vocab
        d = cfg.dim
        self.token_embed = TokenEmbedding(len(vocab), d, rng)
        self.fusion = FusionBlock(d, rng, cfg.heads, cfg.fusion_encoder_layers, cfg.fusion_decoder_layers)
        self.text = TextEncoder(d, rng, cfg.text_layers, cfg.heads, max_len=1 + cfg.pkp_tokens + 32)
        self.image = ImageEncoder(region_dim, d, rng, cfg.image_layers, cfg.heads)
        self.pkp = PKPStore(d, cfg.pkp_tokens)
        self.head = ClassifierHead(d, 1, rng)
        self.logit_scale = ag.parameter(logit_scale)
        self.delta1 = ag.parameter(0.0)
        self.delta2 = ag.parameter(0.0)

    def reinit_domain(self, identity_ids: Sequence[int], rng: np.random.Generator) -> None:
        """Fresh prompt blocks and classifier for a new domain."""
        self.pkp.reinit(identity_ids, rng)
        self.head = ClassifierHead(self.cfg.dim, len(identity_ids), rng)

    # -- parameter groups ----------------------------------------------------

    def text_parameters(self, toggles: Toggles, mode: FusionMode) -> dict[str, Tensor]:
        params = {**self.text.named_parameters("text."), **self.pkp.named_parameters("pkp.")}
        if toggles.dpf:
            params.update(self.token_embed.named_parameters("token_embed."))
            if FusionMode(mode) is FusionMode.DYNAMIC:
                params.update(self.fusion.named_parameters("fusion."))
        return params

    def image_parameters(self, toggles: Toggles) -> dict[str, Tensor]:
        params = self.image.named_parameters("image.")
        if not toggles.tfa:
            params = {k: v for k, v in params.items() if not k.startswith("image.layer_part.")}
        return params

    # -- forward pieces --------------------------------------------------------

    def tokenize_captions(self, captions: Sequence[str]) -> tuple[np.ndarray, TokenSequence]:
        seqs = [tokenize(c, self.vocab) for c in captions]
        lengths = {s.length for s in seqs}
        if len(lengths) != 1:
            raise CaptionStructureError(f"captions in one batch must share a token length, got {sorted(lengths)}")
        return np.stack([s.ids for s in seqs]), seqs[0]

    def text_features(
        self,
        identity_ids: Sequence[int],
        captions: Sequence[str] | None,
        toggles: Toggles,
        mode: FusionMode,
    ) -> tuple[Tensor, Tensor | None]:
        """Global text features [U,d] and, with TFA on, local part features [U,4,d]."""
        pkp = self.pkp.gather(identity_ids)
        if not toggles.dpf:
            f_txt, _ = self.text(pkp)
            return f_txt, None
        ids, markers = self.tokenize_captions(captions)
        ip = self.token_embed(ids)
        prompt = fuse_prompts(ip, pkp, mode, self.fusion)
        f_txt, states = self.text(ag.concat([prompt, ip], axis=1))
        local = split_text_parts(states, markers, offset=1 + prompt.shape[1]) if toggles.tfa else None
        return f_txt, local

    def local_image(self, hidden: Tensor, cls: Tensor) -> Tensor:
        return local_image_features(self.image, hidden, cls)

    def embed(self, regions: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Global image features for retrieval, computed without gradient tracking."""
        out = []
        with ag.no_grad():
            for i in range(0, len(regions), chunk):
                out.append(self.image(regions[i : i + chunk])[0].data)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.dim))


class Teacher(Module):
    """Frozen copy of the image encoder and classifier from the previous domain."""

    def __init__(self, image: ImageEncoder, head: ClassifierHead):
        self.image = image.clone().freeze()
        self.head = head.clone().freeze()

    def logits(self, regions) -> Tensor:
        with ag.no_grad():
            return self.head(self.image(regions)[0])
