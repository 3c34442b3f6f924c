import dataclasses

import numpy as np
import pytest
import torch

from octvq.data import PhantomConfig, generate_synthetic_dataset
from octvq.model import ModelConfig
from octvq.train import TrainConfig


def tiny_train_config(**kw) -> TrainConfig:
    """Smallest network that still exercises every code path; seconds per run."""
    model = ModelConfig(codebook_size=8, codebook_dim=4, channels=(4, 8, 8), disc_channels=4)
    base = TrainConfig(epochs=1, batch_size=4, warmup_steps=3, learning_rate=1e-3, model=model)
    return dataclasses.replace(base, **kw)


@pytest.fixture(scope="session")
def phantoms():
    return generate_synthetic_dataset(PhantomConfig(), 12, seed=3)


@pytest.fixture
def tiny_cfg():
    return tiny_train_config()


@pytest.fixture(autouse=True)
def _torch_threads():
    torch.set_num_threads(1)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
