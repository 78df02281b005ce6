import numpy as np
import pytest

from curvedslice.cage import cage_from_voxels
from curvedslice.implicit import Capsule, solid_from_nodes


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def block_cage():
    """4 x 3 x 2 voxels of size 1 split into 144 tets."""
    return cage_from_voxels(np.ones((4, 3, 2), bool), (0.0, 0.0, 0.0), 1.0)


@pytest.fixture(scope="session")
def sphere():
    return solid_from_nodes(Capsule((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), 1.0))
