import numpy as np
import pytest

from magnet import tensor


@pytest.fixture(autouse=True)
def _debug_checks():
    # every op result is finiteness-checked while under test
    tensor.set_debug_checks(True)
    yield
    tensor.set_debug_checks(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
