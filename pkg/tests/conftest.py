"""Shared fixtures; puts src/ on sys.path so modules import by sibling name."""

import sys
from pathlib import Path

import numpy as np
import pytest

SRC = Path(__file__).resolve().parents[1] / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))


@pytest.fixture
def rng():
    return np.random.default_rng(20240917)


def random_batch(rng, n, d, targets=True):
    """Random BatchEmbeddings with targets drawn from U[0, 1]."""
    from losses import BatchEmbeddings

    text = rng.standard_normal((n, d))
    audio = rng.standard_normal((n, d))
    a = rng.uniform(0.0, 1.0, size=n) if targets else None
    return BatchEmbeddings(text, audio, a)
