import numpy as np
import pytest

from boltzray.core import Lattice, build_direction_quadrature


@pytest.fixture(scope="session")
def small_lattice():
    # box 4 with margin 1 leaves a [1, 3]^3 support cube; dt = 1/7
    return Lattice(t_final=1.0, n_t=8, box_len=4.0, n_x=8, support_margin=1.0)


@pytest.fixture(scope="session")
def mid_lattice():
    return Lattice(t_final=1.0, n_t=16, box_len=4.0, n_x=16, support_margin=1.0)


@pytest.fixture(scope="session")
def quad4():
    return build_direction_quadrature(4)


@pytest.fixture(scope="session")
def quad6():
    return build_direction_quadrature(6)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20260814)
