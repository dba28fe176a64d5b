import numpy as np
import pytest

from app.services.mesh import build_cartesian, build_triangulation, staggered_triangulation


@pytest.fixture
def two_cells():
    """[0,1]^2 split in two: m_K = 0.5, a_sigma = 2."""
    return build_cartesian(2, 1)


@pytest.fixture
def grid4():
    return build_cartesian(4, 4)


@pytest.fixture
def triangles24():
    return build_triangulation(*staggered_triangulation(2, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
