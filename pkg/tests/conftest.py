import pathlib

import numpy as np
import pytest

REPO = pathlib.Path(__file__).resolve().parents[1]


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def mnist_paths():
    d = REPO / "data" / "mnist"
    return {
        "train_images": d / "train-images.idx",
        "train_labels": d / "train-labels.idx",
        "test_images": d / "test-images.idx",
        "test_labels": d / "test-labels.idx",
    }


@pytest.fixture(scope="session")
def corpus_paths():
    d = REPO / "data" / "tinytext"
    return {
        "train": d / "train.txt",
        "valid": d / "valid.txt",
        "test": d / "test.txt",
    }
