import numpy as np
import pytest
from hypothesis import settings

from helmdd.grid import CartesianGrid, FrequencySpec, VelocityModel
from helmdd.stencil import default_table

settings.register_profile("ci", deadline=None, max_examples=25)
settings.load_profile("ci")


@pytest.fixture(scope="session")
def table():
    return default_table()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def homogeneous(n, G=4.0, c0=1000.0, f=10.0):
    """n^3 constant model sampled at G points per wavelength."""
    h = c0 / f / G
    return VelocityModel(CartesianGrid(n, n, n, h), np.full((n, n, n), c0)), FrequencySpec(f)
