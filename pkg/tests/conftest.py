import numpy as np
import pytest

from gistdesk import kernels


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(params=sorted(kernels.available_backends()))
def backend(request, monkeypatch):
    """Run a test once per available kernel backend."""
    monkeypatch.setattr(kernels, "_impl", kernels.available_backends()[request.param])
    return request.param


def unit_rows(rng, n, dim):
    x = rng.normal(size=(n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)
