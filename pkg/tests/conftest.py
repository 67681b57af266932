import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from capsroute import tensor as T


@pytest.fixture
def f64():
    """Run a test in float64 mode (gradient checks are meaningless in f32)."""
    with T.using_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
