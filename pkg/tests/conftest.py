import numpy as np
import pytest

from changeseg.backbone import BackboneConfig
from changeseg.config import Config
from changeseg.data import synth_generate
from changeseg.tensor import Rng


@pytest.fixture
def rng():
    return Rng(1234)


def tiny_config(**overrides) -> Config:
    """A small model that trains in a fraction of a second per step."""
    cfg = Config()
    cfg.backbone = BackboneConfig(stage_channels=(8, 16, 16, 32), blocks_per_stage=(1, 1, 1, 1),
                                  lora_r=2, lora_alpha=4.0, lora_blocks=2, prompt_count=3)
    cfg.mscad.common_dim = 8
    cfg.decoder.num_classes = 4
    cfg.train.epochs = 2
    cfg.train.batch = 2
    for k, v in overrides.items():
        cfg.set(k, v)
    return cfg.validate()


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    synth_generate(root, count=4, size=32, k=3, seed=11, val_count=2)
    return root


def random_images(rng: Rng, n: int, size: int = 32) -> np.ndarray:
    return rng.integers(0, 256, size=(n, size, size, 3)).astype(np.uint8)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
