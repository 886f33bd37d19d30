import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from fields import Grid, random_velocity  # noqa: E402


@pytest.fixture
def grid():
    return Grid(16, box_length=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def fields3(grid, rng):
    return [random_velocity(grid, rng, amplitude=rng.uniform(0.5, 1.5), max_mode=5) for _ in range(3)]
