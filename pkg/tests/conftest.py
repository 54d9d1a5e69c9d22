from __future__ import annotations

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numpy as np
import pytest
from hypothesis import settings

from sphereproj.grid import SdfGrid, sphere_sdf, torus_sdf
from sphereproj.mesh import TriangleMesh, icosphere, torus_mesh
from sphereproj.sphere import healpix_grid

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture(scope="session")
def ico_small():
    return icosphere(3, 0.5)


@pytest.fixture(scope="session")
def ico_mid():
    return icosphere(4, 0.5)


@pytest.fixture(scope="session")
def torus_small():
    return torus_mesh(0.5, 0.2, 32, 16)


@pytest.fixture(scope="session")
def tilted_triangle():
    v = np.array([[0.3, -0.2, -0.1], [-0.2, 0.4, 0.05], [-0.1, -0.3, 0.3]])
    return TriangleMesh(v, np.array([[0, 1, 2]]))


@pytest.fixture(scope="session")
def hp8():
    return healpix_grid(8)


@pytest.fixture(scope="session")
def hp16():
    return healpix_grid(16)


@pytest.fixture(scope="session")
def sphere_grid64():
    return SdfGrid.from_function(sphere_sdf(0.5), 64)


@pytest.fixture(scope="session")
def torus_grid64():
    return SdfGrid.from_function(torus_sdf(0.5, 0.2), 64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
