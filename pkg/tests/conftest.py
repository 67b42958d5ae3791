import numpy as np
import pytest

from nexus import tensor as T


@pytest.fixture(autouse=True)
def _float64_numpy():
    """Tests default to 64-bit numpy kernels; acceptance runs switch explicitly."""
    dtype, backend = T.get_default_dtype(), T.get_conv_backend()
    T.set_default_dtype(np.float64)
    T.set_conv_backend("numpy")
    yield
    T.set_default_dtype(dtype)
    T.set_conv_backend(backend)
