"""Rehearsal-free lifelong retrieval with caption-derived dynamic prompts, on a numpy autodiff core."""

from .config import RunConfig, Toggles, TrainConfig, desk_preset, load_config
from .evaluation import MetricReport, aggregate, evaluate
from .synth import GeneratorConfig, generate_stream, load_stream, save_stream
from .trainer import LifelongTrainer, run_lifelong

__all__ = [
    "GeneratorConfig",
    "LifelongTrainer",
    "MetricReport",
    "RunConfig",
    "Toggles",
    "TrainConfig",
    "aggregate",
    "desk_preset",
    "evaluate",
    "generate_stream",
    "load_config",
    "load_stream",
    "run_lifelong",
    "save_stream",
]

__version__ = "0.1.0"
