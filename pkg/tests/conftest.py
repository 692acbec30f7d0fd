import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gasca.core import SeededRng
from gasca.data import split, synth_pose_dataset
from gasca.model import StageFactory
from gasca.trainer import StageConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_pairs():
    """32 rotated 8x8 samples plus 8 for validation."""
    ds = synth_pose_dataset(40, 8, 60.0, SeededRng(11))
    train, val, _ = split(ds, 0.2, SeededRng(12))
    return train, val


@pytest.fixture(scope="session")
def pose16():
    ds = synth_pose_dataset(48, 16, 60.0, SeededRng(21))
    train, val, _ = split(ds, 0.25, SeededRng(22))
    return train, val


@pytest.fixture
def factory():
    return StageFactory(channels=(4, 8, 16))


@pytest.fixture
def tiny_cfg():
    return StageConfig(epochs_stage=2, epochs_finetune_g=2, epochs_finetune_d=2, batch_size=8)


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_LINES


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
