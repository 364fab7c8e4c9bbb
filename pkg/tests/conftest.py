import numpy as np
import pytest

from fxmoe.context import RunContext
from fxmoe.fixedpoint import FormatCatalog


@pytest.fixture
def catalog() -> FormatCatalog:
    return FormatCatalog()


@pytest.fixture
def ctx():
    with RunContext() as c:
        yield c


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
