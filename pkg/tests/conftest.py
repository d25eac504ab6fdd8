"""Shared pytest fixtures for tests."""

from pathlib import Path

import numpy as np
import pytest

from src.core import MaxAffineModel, grid_approximator, squared_norm_spec
from src.data import load_csv

EXAMPLES = Path(__file__).parent.parent / "data" / "examples"


@pytest.fixture
def examples_dir() -> Path:
    return EXAMPLES


@pytest.fixture
def tangent_model() -> MaxAffineModel:
    """Tangents of x^2 at -1, 0 and 1"""
    return MaxAffineModel(slopes=[[-2.0], [0.0], [2.0]], offsets=[-1.0, 0.0, -1.0], lipschitz=2.0)


@pytest.fixture
def toy_separable():
    return load_csv(str(EXAMPLES / "toy_separable.csv"))


@pytest.fixture
def squared_model() -> MaxAffineModel:
    """Dense tangent-plane surrogate of ||x||^2 on [-12, 12]^2"""
    return grid_approximator(squared_norm_spec(2, radius=12.0), 144)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def random_model(rng: np.random.Generator, K: int, d: int) -> MaxAffineModel:
    slopes = rng.normal(size=(K, d))
    offsets = rng.normal(size=K)
    return MaxAffineModel(slopes, offsets, float(np.abs(slopes).sum(axis=1).max()))
