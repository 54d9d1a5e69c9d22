"""Differentiable spherical projection of triangle meshes and SDF grids."""

from __future__ import annotations

import os

# TBB is often missing; workqueue keeps numba parallel loops quiet and deterministic
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

from .errors import *  # noqa: E402,F401,F403
from .grid import SdfGrid, route_surface_gradient, sample_field  # noqa: E402
from .mcubes import marching_cubes  # noqa: E402
from .mesh import TriangleMesh, normalize_to_unit_sphere  # noqa: E402
from .project import ProjectionConfig, SphericalMap, full_projection, project_backward, \
    project_forward  # noqa: E402
from .sphere import equirect_grid, healpix_grid, make_rays  # noqa: E402

__all__ = [
    "SdfGrid", "TriangleMesh", "SphericalMap", "ProjectionConfig",
    "marching_cubes", "sample_field", "route_surface_gradient", "normalize_to_unit_sphere",
    "healpix_grid", "equirect_grid", "make_rays",
    "project_forward", "project_backward", "full_projection",
]
