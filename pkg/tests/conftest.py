import numpy as np
import pytest

from zfcl.data import DatasetSpec, load_dataset
from zfcl.nn import small_cnn
from zfcl.trainer import TrainConfig, pretrain


@pytest.fixture(scope="session")
def digits_split():
    return load_dataset(DatasetSpec("digits"))


@pytest.fixture(scope="session")
def tiny_base(digits_split):
    """A briefly pretrained narrow CNN shared by tests that only read it."""
    train, _ = digits_split
    model = small_cnn(1, 10, widths=(4, 8, 8), hidden=16, seed=0)
    return pretrain(model, train.head(400), TrainConfig(epochs=2, lr=1e-2, lr_decay_epoch=1))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
