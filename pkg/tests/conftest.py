import os

import numpy as np
import pytest

from hessreg.data import load_manifest, make_blobs

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture(scope="session")
def digits():
    """8x8 byte-grid digit images, checksummed; the offline stand-in for
    downsampled MNIST."""
    return load_manifest(os.path.join(FIXTURES, "digits.json"))


@pytest.fixture(scope="session")
def blobs3():
    return make_blobs(120, 3, 2, separation=6.0, seed=11)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
