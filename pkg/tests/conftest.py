import numpy as np
import pytest

from partsel import tensor as T


@pytest.fixture(autouse=True)
def _clean_engine_state():
    """Reset dtype mode and tape between tests so no test leaks graph state."""
    yield
    T.set_default_dtype("float32")
    T._state.tape = T._Tape()
    T._state.grad_enabled = True


@pytest.fixture
def f64():
    """Run the test body in double-precision mode."""
    T.set_default_dtype("float64")
    yield
    T.set_default_dtype("float32")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
