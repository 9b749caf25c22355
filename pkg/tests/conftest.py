import numpy as np
import pytest

from wcrlab.families import register_builtin_families
from wcrlab.estimators import register_builtin_estimators


@pytest.fixture(scope="session")
def families():
    return register_builtin_families()


@pytest.fixture(scope="session")
def estimators():
    return register_builtin_estimators()


@pytest.fixture(scope="session")
def unit_square():
    return np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
