"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from varicurate import EmbeddingSet, normalize


def unit_rows(rng: np.random.Generator, n: int, d: int) -> np.ndarray:
    """Random rows on the unit sphere, float64."""
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1)[:, None]


def random_set(
    rng: np.random.Generator,
    n: int,
    d: int,
    prefix: str = "s",
    identities=None,
) -> EmbeddingSet:
    """Unit-normalized embedding set with generated ids."""
    ids = tuple(f"{prefix}{i:04d}" for i in range(n))
    es = EmbeddingSet(rng.standard_normal((n, d)), ids, tuple(identities or ()))
    return normalize(es)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240817)
