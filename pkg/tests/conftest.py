import numpy as np
import pytest
import torch
from hypothesis import settings

from protoprompt.backbone import BackboneConfig
from protoprompt.fusion import FusionConfig

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def micro_backbone():
    return BackboneConfig(image_size=32, patch_size=8, depth=2, embed_dim=16, num_heads=2, num_prompted_layers=2, class_count=3)


@pytest.fixture
def micro_fusion():
    return FusionConfig(n=2, per_layer_m=[5, 3])


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def tiny_overrides(out_dir, **extra) -> dict:
    """A run small enough to train in a couple of seconds on one CPU core."""
    flat = {
        "backbone.image_size": 32,
        "backbone.depth": 2,
        "backbone.embed_dim": 16,
        "backbone.num_heads": 2,
        "backbone.num_prompted_layers": 2,
        "backbone.class_count": 2,
        "fusion.n": 2,
        "fusion.per_layer_m": [5, 3],
        "data.synth.num_classes": 2,
        "data.synth.num_parts": 2,
        "data.synth.samples_per_class": 12,
        "data.synth.image_size": 32,
        "data.synth.translation": 2.0,
        "optimizer.batch_size": 8,
        "optimizer.epochs": 2,
        "warmup_epochs": 1,
        "output_dir": str(out_dir),
    }
    flat.update(extra)
    return flat


@pytest.fixture
def tiny_config(tmp_path):
    from protoprompt.config import RunConfig, apply_overrides

    return apply_overrides(RunConfig(), tiny_overrides(tmp_path / "run"))


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}")
