"""Experiment configuration. Unknown keys are rejected everywhere."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Optional

import yaml
from pydantic import BaseModel, ConfigDict, model_validator

from .fusion import FusionMode
from .synth import GeneratorConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Strict):
    dim: int = 32
    heads: int = 4
    image_layers: int = 2
    text_layers: int = 2
    fusion_encoder_layers: int = 2
    fusion_decoder_layers: int = 2
    pkp_tokens: int = 4


class TrainConfig(_Strict):
    stage1_epochs: int = 60
    stage2_epochs: int = 60
    ids_per_batch: int = 32
    instances_per_id: int = 4
    lr: float = 3.5e-4
    weight_decay: float = 1e-4
    warmup_start: float = 0.01
    warmup_fraction: float = 0.1
    lambda_tfa: float = 1.0
    lkd_weight: float = 0.1
    kd_temperature: float = 2.0
    triplet_margin: float = 0.3
    logit_scale_init: float = 0.0
    unfreeze_text_stage2: bool = False

    @property
    def batch_size(self) -> int:
        return self.ids_per_batch * self.instances_per_id

    @model_validator(mode="after")
    def _check(self):
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.ids_per_batch < 1 or self.instances_per_id < 1:
            raise ValueError("batch dimensions must be positive")
        if self.lr <= 0 or self.kd_temperature <= 0:
            raise ValueError("learning rate and temperature must be positive")
        if min(self.lambda_tfa, self.lkd_weight, self.weight_decay) < 0:
            raise ValueError("loss weights must be non-negative")
        return self


class Toggles(_Strict):
    """Component switches; all off gives the CLIP-ReID-style baseline."""

    dpf: bool = True
    tfa: bool = True
    kd: bool = True
    lkd: bool = True

    @model_validator(mode="after")
    def _check(self):
        if self.lkd and not self.kd:
            raise ValueError("lkd requires kd")
        if self.tfa and not self.dpf:
            raise ValueError("tfa needs caption prompts, so it requires dpf")
        return self


class RunConfig(_Strict):
    name: str = "run"
    seed: int = 0
    generator: GeneratorConfig = GeneratorConfig()
    stream_dir: Optional[str] = None
    training_order: Optional[list[int]] = None
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    fusion_mode: FusionMode = FusionMode.DYNAMIC
    toggles: Toggles = Toggles()
    camera_exclusion: bool = True
    output_dir: Optional[str] = None


def desk_preset(**overrides) -> RunConfig:
    """Small configuration that trains a 3-seen + 1-unseen stream in well under a minute."""
    base = RunConfig(
        generator=GeneratorConfig(n_seen_domains=3, n_unseen_domains=1, ids_per_domain=16),
        train=TrainConfig(
            stage1_epochs=3,
            stage2_epochs=3,
            ids_per_batch=4,
            instances_per_id=4,
            lr=3e-3,
            logit_scale_init=math.log(1 / 0.07),
            lkd_weight=2.0,
            kd_temperature=1.0,
        ),
    )
    return base.model_copy(update=overrides, deep=True)


def load_config(path: str | Path) -> RunConfig:
    data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    return RunConfig.model_validate(data)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)
