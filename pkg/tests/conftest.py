import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def tiny_images(rng):
    """Eight small grayscale images in [0, 1]."""
    return rng.random((8, 1, 6, 6)).astype(np.float32)


@pytest.fixture(scope="session")
def digits_data():
    """The bundled 8x8 digits, scaled to [0, 1], as (images, labels)."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    images = (raw.images / 16.0).astype(np.float32)[:, None, :, :]
    return images, raw.target.astype(np.int64)
