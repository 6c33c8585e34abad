import numpy as np
import pytest

from pfmdose import kernels
from pfmdose.tensor import finite_checks


@pytest.fixture(autouse=True)
def _finite_checks_on():
    with finite_checks(True):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numpy", "compiled"])
def conv_backend(request, monkeypatch):
    """Run a test once per conv3x3 kernel backend."""
    if request.param == "numpy":
        mod = kernels.numpy_backend
    else:
        if kernels.compiled_backend is None:
            pytest.skip("compiled kernel not built")
        mod = kernels.compiled_backend
    monkeypatch.setattr(kernels, "conv3x3_forward", mod.conv3x3_forward)
    monkeypatch.setattr(kernels, "conv3x3_backward", mod.conv3x3_backward)
    return request.param
