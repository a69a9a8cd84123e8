from __future__ import annotations

import numpy as np
import pytest

import tsvadlab


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small on-disk dataset shared by datagen/eval/cli tests."""
    root = tmp_path_factory.mktemp("tiny_ds")
    tsvadlab.build_dataset(root, n_speakers=6, n_utterances=24, seed=7)
    return tsvadlab.load_dataset(root)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
