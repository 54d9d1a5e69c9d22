"""Regular signed-distance grids over the cube [-1, 1]^3.

The grid values are the optimizable field parameters. Evaluation is
trilinear, so the field gradient is the exact derivative of the
interpolant, and surface-vertex adjoints can be routed back onto the grid
values with the same trilinear weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import OutOfDomain
from .mesh import TriangleMesh

EXTENT = (-1.0, 1.0)
DEFAULT_OMEGA = 1e-4
DEGENERATE_NORMAL_EPS = 1e-12


@dataclass(frozen=True)
class SdfGrid:
    """``values[i, j, k]`` is the field at ``(x_i, y_j, z_k)``,
    ``x_i = -1 + i * h`` with ``h = 2 / (R - 1)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float64))
        if v.ndim != 3 or not (v.shape[0] == v.shape[1] == v.shape[2]):
            raise ValueError(f"grid values must be a cube, got shape {v.shape}")
        if v.shape[0] < 2:
            raise ValueError("grid resolution must be >= 2")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @property
    def spacing(self) -> float:
        return (EXTENT[1] - EXTENT[0]) / (self.resolution - 1)

    def axis(self) -> np.ndarray:
        return np.linspace(EXTENT[0], EXTENT[1], self.resolution)

    def points(self) -> np.ndarray:
        """All node coordinates, ``(R, R, R, 3)``."""
        a = self.axis()
        return np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1)

    @classmethod
    def from_function(cls, fn, resolution: int) -> "SdfGrid":
        """Sample ``fn(points (..., 3)) -> values (...)`` at every node."""
        a = np.linspace(EXTENT[0], EXTENT[1], resolution)
        pts = np.stack(np.meshgrid(a, a, a, indexing="ij"), axis=-1)
        return cls(fn(pts))

    def with_values(self, values) -> "SdfGrid":
        return SdfGrid(values)


@dataclass
class FieldSample:
    value: float
    gradient: np.ndarray


@dataclass
class AdjointBuffers:
    """Gradient accumulators for one mesh / grid pair."""

    vertex_grads: np.ndarray
    field_grads: np.ndarray
    degenerate_normals: int = 0

    @classmethod
    def zeros(cls, mesh: TriangleMesh, grid: SdfGrid) -> "AdjointBuffers":
        return cls(np.zeros((mesh.n_vertices, 3)), np.zeros(grid.values.shape))


@dataclass
class RoutingResult:
    field_grads: np.ndarray
    degenerate_normals: int = 0
    vertex_adjoints: np.ndarray = field(default=None, repr=False)


def _cell_coords(grid: SdfGrid, points: np.ndarray):
    """Cell index and in-cell fraction for each point (validated in-domain)."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if np.any(~np.isfinite(p)) or np.any(p < EXTENT[0]) or np.any(p > EXTENT[1]):
        raise OutOfDomain("sample point outside [-1, 1]^3")
    h = grid.spacing
    s = (p - EXTENT[0]) / h
    idx = np.clip(np.floor(s).astype(np.int64), 0, grid.resolution - 2)
    frac = s - idx
    return idx, frac, h


def sample_field_batch(grid: SdfGrid, points):
    """Trilinear value and analytic gradient at many points.

    Returns ``(values (n,), gradients (n, 3))``.
    """
    idx, f, h = _cell_coords(grid, points)
    v = grid.values
    i, j, k = idx.T
    c = np.empty((len(idx), 2, 2, 2))
    for a in (0, 1):
        for b in (0, 1):
            for d in (0, 1):
                c[:, a, b, d] = v[i + a, j + b, k + d]
    fx, fy, fz = f.T
    # interpolate along x, then y, then z
    cx = c[:, 0] * (1 - fx)[:, None, None] + c[:, 1] * fx[:, None, None]
    dcx = c[:, 1] - c[:, 0]
    cxy = cx[:, 0] * (1 - fy)[:, None] + cx[:, 1] * fy[:, None]
    value = cxy[:, 0] * (1 - fz) + cxy[:, 1] * fz
    gz = cxy[:, 1] - cxy[:, 0]
    dcy = cx[:, 1] - cx[:, 0]
    gy = dcy[:, 0] * (1 - fz) + dcy[:, 1] * fz
    dxy = dcx[:, 0] * (1 - fy)[:, None] + dcx[:, 1] * fy[:, None]
    gx = dxy[:, 0] * (1 - fz) + dxy[:, 1] * fz
    grad = np.stack([gx, gy, gz], axis=1) / h
    return value, grad


def sample_field(grid: SdfGrid, p) -> FieldSample:
    value, grad = sample_field_batch(grid, np.asarray(p, dtype=np.float64).reshape(1, 3))
    return FieldSample(float(value[0]), grad[0])


def trilinear_weights(grid: SdfGrid, points):
    """Flat node indices ``(n, 8)`` and weights ``(n, 8)`` of the enclosing cells."""
    idx, f, _ = _cell_coords(grid, points)
    R = grid.resolution
    nodes = np.empty((len(idx), 8), dtype=np.int64)
    weights = np.empty((len(idx), 8))
    col = 0
    for a in (0, 1):
        wa = f[:, 0] if a else 1 - f[:, 0]
        for b in (0, 1):
            wb = f[:, 1] if b else 1 - f[:, 1]
            for d in (0, 1):
                wd = f[:, 2] if d else 1 - f[:, 2]
                nodes[:, col] = ((idx[:, 0] + a) * R + idx[:, 1] + b) * R + idx[:, 2] + d
                weights[:, col] = wa * wb * wd
                col += 1
    return nodes, weights


def route_surface_gradient(mesh: TriangleMesh, grid: SdfGrid, vertex_grads, omega: float = DEFAULT_OMEGA,
                           return_details: bool = False):
    """Turn per-vertex loss gradients into gradients on the grid values.

    Each vertex gets the scalar adjoint ``-(dL/dv . n(v)) * omega`` with
    ``n(v)`` the normalized field gradient, scattered trilinearly into the 8
    surrounding nodes. Vertices whose field gradient norm is below 1e-12
    contribute nothing and are counted in ``degenerate_normals``.
    """
    g = np.asarray(vertex_grads, dtype=np.float64).reshape(-1, 3)
    if len(g) != mesh.n_vertices:
        raise ValueError(f"expected {mesh.n_vertices} vertex gradients, got {len(g)}")
    out = np.zeros(grid.values.size)
    if mesh.n_vertices == 0:
        res = RoutingResult(out.reshape(grid.values.shape), 0, np.zeros(0))
        return res if return_details else res.field_grads
    _, grad = sample_field_batch(grid, mesh.vertices)
    norm = np.linalg.norm(grad, axis=1)
    degenerate = norm < DEGENERATE_NORMAL_EPS
    n = grad / np.where(degenerate, 1.0, norm)[:, None]
    adj = -(g * n).sum(axis=1) * omega
    adj[degenerate] = 0.0
    nodes, weights = trilinear_weights(grid, mesh.vertices)
    np.add.at(out, nodes.ravel(), (weights * adj[:, None]).ravel())
    res = RoutingResult(out.reshape(grid.values.shape), int(degenerate.sum()), adj)
    return res if return_details else res.field_grads


# ---------------------------------------------------------------------------
# file I/O: one text header line, then R^3 little-endian float32, x fastest


def write_grid(path, grid: SdfGrid) -> None:
    header = f"SDFGRID v1 R={grid.resolution} extent=-1,1\n".encode("ascii")
    data = grid.values.astype("<f4").ravel(order="F").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data)


def read_grid(path) -> SdfGrid:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) < 3 or header[0] != "SDFGRID" or header[1] != "v1":
            raise ValueError(f"{path}: not an SDFGRID v1 file")
        fields = dict(tok.split("=", 1) for tok in header[2:])
        R = int(fields["R"])
        if fields.get("extent", "-1,1") != "-1,1":
            raise ValueError(f"{path}: unsupported extent {fields['extent']}")
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != R ** 3:
        raise ValueError(f"{path}: expected {R ** 3} values, found {data.size}")
    return SdfGrid(data.astype(np.float64).reshape((R, R, R), order="F"))


# ---------------------------------------------------------------------------
# analytic fields


def sphere_sdf(radius: float = 0.5, center=(0.0, 0.0, 0.0)):
    c = np.asarray(center, dtype=np.float64)

    def fn(p):
        return np.linalg.norm(p - c, axis=-1) - radius

    return fn


def torus_sdf(major: float = 0.5, minor: float = 0.2):
    def fn(p):
        q = np.sqrt(p[..., 0] ** 2 + p[..., 1] ** 2) - major
        return np.sqrt(q ** 2 + p[..., 2] ** 2) - minor

    return fn
