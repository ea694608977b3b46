import os

import numpy as np
import pytest

from monoforward.data import FormatError, load_named

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
DATA = os.environ.get("DATA_DIR", os.path.join(REPO, "data"))


def _dataset_or_skip(name, train):
    try:
        return load_named(name, DATA, train=train)
    except FormatError:
        pytest.skip(f"{name} files not available under {DATA}")


@pytest.fixture(scope="session")
def mnist_train():
    return _dataset_or_skip("mnist", True)


@pytest.fixture(scope="session")
def mnist_test():
    return _dataset_or_skip("mnist", False)


@pytest.fixture(scope="session")
def cifar_train():
    return _dataset_or_skip("cifar10", True)


@pytest.fixture(scope="session")
def cifar_test():
    return _dataset_or_skip("cifar10", False)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
