import numpy as np
import pytest
from hypothesis import settings

from dtp.config import ModelConfig, RunConfig, TrainConfig
from dtp.synth import GeneratorConfig, generate_stream

settings.register_profile("dtp", max_examples=40, deadline=None)
settings.load_profile("dtp")


def tiny_config(**overrides) -> RunConfig:
    cfg = RunConfig(
        name="tiny",
        generator=GeneratorConfig(
            n_seen_domains=2,
            n_unseen_domains=1,
            ids_per_domain=8,
            images_per_id=4,
            test_ids_per_domain=8,
            test_images_per_id=2,
        ),
        model=ModelConfig(dim=16, heads=4, image_layers=2, text_layers=1, fusion_encoder_layers=1, fusion_decoder_layers=1),
        train=TrainConfig(stage1_epochs=1, stage2_epochs=1, ids_per_batch=4, instances_per_id=2, lr=1e-3),
    )
    return cfg.model_copy(update=overrides, deep=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_stream():
    cfg = tiny_config()
    return generate_stream(cfg.generator, 0)


# criterion id -> (passed, detail); filled by the acceptance suite
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"criterion {cid}: {'PASS' if ok else 'FAIL'}  {detail}")
