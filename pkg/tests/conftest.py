import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("default")

DATA_ROOT = Path(os.environ.get("MBCLIQUENET_DATA", "/root/data"))
MNIST_DIR = DATA_ROOT / "mnist"
CIFAR_DIR = DATA_ROOT / "cifar-10-batches-bin"


def naive_conv2d(x, f, stride=1, padding=0):
    """Loop-over-output oracle, independent of the BLAS paths."""
    n, c, h, w = x.shape
    o, _, k, _ = f.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for q in range(o):
            for r in range(ho):
                for s in range(wo):
                    win = xp[b, :, r * stride:r * stride + k, s * stride:s * stride + k]
                    out[b, q, r, s] = np.sum(win * f[q])
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mnist_dir():
    if not (MNIST_DIR / "train-images-idx3-ubyte").exists():
        pytest.skip(f"MNIST files not found under {MNIST_DIR}")
    return MNIST_DIR


@pytest.fixture(scope="session")
def cifar_dir():
    if not (CIFAR_DIR / "data_batch_1.bin").exists():
        pytest.skip(f"CIFAR-10 binary batches not found under {CIFAR_DIR}")
    return CIFAR_DIR


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[number])
