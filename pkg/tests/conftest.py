import os
from pathlib import Path

import numpy as np
import pytest

from cgmq.mnist import load_split

ROOT = Path(__file__).resolve().parents[1]
DATA_DIR = Path(os.environ.get("CGMQ_DATA_DIR", ROOT / "data" / "mnist"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def data_dir():
    if not (DATA_DIR / "train-images-idx3-ubyte.gz").exists() and \
            not (DATA_DIR / "train-images-idx3-ubyte").exists():
        pytest.fail(f"MNIST not found in {DATA_DIR}; set CGMQ_DATA_DIR")
    return DATA_DIR


@pytest.fixture(scope="session")
def mnist(data_dir):
    return load_split(data_dir, "train"), load_split(data_dir, "test")


@pytest.fixture(scope="session")
def small_mnist(mnist):
    """1024 training and 500 test images for quick pipeline runs."""
    train, test = mnist
    return train.subset(1024), test.subset(500)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
