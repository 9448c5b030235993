from pathlib import Path

import numpy as np
import pytest

from callback_mnar.data import Dataset
from callback_mnar.simulation import get_scenario, sample_dataset

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture
def table1() -> Dataset:
    """One record per call pattern: first-call, second-call, nonrespondent."""
    x = np.array([[1.0, 0.5], [1.0, -0.3], [1.0, 0.1]])
    return Dataset(x, [1.2, 0.7, None], [1, 0, 0], [1, 1, 0], ["const", "x1"])


@pytest.fixture(scope="session")
def tt_draw() -> Dataset:
    return sample_dataset(get_scenario("TT"), 3000, 2024)
