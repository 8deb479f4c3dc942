from pathlib import Path

import pytest

from lookalign import data

MNIST_DIR = Path(__file__).resolve().parents[1] / "data" / "mnist"


def load_bundled():
    tr = data.load_mnist(MNIST_DIR / "train-images-idx3-ubyte.gz", MNIST_DIR / "train-labels-idx1-ubyte.gz")
    te = data.load_mnist(MNIST_DIR / "t10k-images-idx3-ubyte.gz", MNIST_DIR / "t10k-labels-idx1-ubyte.gz")
    return tr, te


@pytest.fixture(scope="session")
def mnist():
    return load_bundled()
