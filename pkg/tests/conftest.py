"""Shared fixtures: repository root on sys.path and seeded generators."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_rng():
    def factory(seed: int) -> np.random.Generator:
        return np.random.default_rng(seed)
    return factory
