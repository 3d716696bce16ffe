import pytest

from tkpcl.config import load_config
from tkpcl.datagen import generate

TINY = [
    "dataset.h=32", "dataset.w=32", "dataset.n_classes=3", "dataset.n_train=8", "dataset.n_val=4",
    "dataset.min_size=4", "dataset.max_size=6", "dataset.max_shapes=2",
    "encoder.e=8", "encoder.n_blocks=1", "encoder.n_heads=2",
    "train.batch_size=4", "train.max_epochs=3", "train.k=3", "train.epsilon=0.55",
]


@pytest.fixture(scope="session")
def tiny_config():
    return load_config(None, TINY, env={})


@pytest.fixture(scope="session")
def tiny_data(tiny_config):
    return generate(tiny_config.dataset)


# filled by test_acceptance.py, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
