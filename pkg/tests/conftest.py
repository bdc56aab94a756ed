import time
from dataclasses import dataclass

import pytest

from defence.fencegen import build_synthetic_dataset, write_toy_corpus
from defence.train import (
    TrainingConfig,
    load_dataset,
    train_mask_generator,
    train_recovering_network,
    train_single_stage,
)

OVERFIT_SIZE = 64
OVERFIT_ITEMS = 8


def pytest_configure(config):
    config.acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_lines:
        terminalreporter.section("acceptance criteria")
        for line in config.acceptance_lines:
            terminalreporter.write_line(line)


@pytest.fixture
def acceptance_lines(request):
    return request.config.acceptance_lines


@dataclass
class TimedRun:
    result: object
    seconds: float


def _timed(fn, *args):
    start = time.perf_counter()
    result = fn(*args)
    return TimedRun(result, time.perf_counter() - start)


@pytest.fixture(scope="session")
def toy_dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    write_toy_corpus(root / "corpus", count=OVERFIT_ITEMS, size=OVERFIT_SIZE, seed=0)
    build_synthetic_dataset(root / "corpus", None, root / "data", seed=0, size=OVERFIT_SIZE)
    return root / "data"


@pytest.fixture(scope="session")
def toy_dataset(toy_dataset_dir):
    return load_dataset(toy_dataset_dir)


@pytest.fixture
def tiny_config():
    """A few steps of a very narrow network: exercises the loop, not the quality."""
    return TrainingConfig(max_epochs=2, max_steps=4, batch_size=4, base_width=4, disc_base_width=4, seed=3)


@pytest.fixture(scope="session")
def overfit_config():
    return TrainingConfig(
        max_epochs=500, max_steps=500, batch_size=1, base_width=32, disc_base_width=32, seed=0, epsilon=1e-3
    )


@pytest.fixture(scope="session")
def ckpt_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("ckpt")


@pytest.fixture(scope="session")
def mask_run(toy_dataset, overfit_config, ckpt_dir):
    return _timed(train_mask_generator, toy_dataset, overfit_config, ckpt_dir / "mask")


@pytest.fixture(scope="session")
def recover_run(toy_dataset, overfit_config, ckpt_dir):
    return _timed(train_recovering_network, toy_dataset, overfit_config, ckpt_dir / "recover")


@pytest.fixture(scope="session")
def single_run(toy_dataset, overfit_config, ckpt_dir):
    return _timed(train_single_stage, toy_dataset, overfit_config, ckpt_dir / "single")
