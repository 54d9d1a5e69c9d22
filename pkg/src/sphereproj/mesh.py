"""Indexed triangle meshes, OBJ I/O and a few reference shapes."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import EmptyMesh


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle surface.

    ``vertices`` is ``(n, 3)`` float64, ``faces`` is ``(m, 3)`` int64 with
    right-hand-rule winding (normals point outward for closed surfaces).
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64).reshape(-1, 3))
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                raise ValueError("face index out of range")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("degenerate face with repeated vertex index")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_empty(self) -> bool:
        return self.n_faces == 0

    def triangles(self) -> np.ndarray:
        """``(m, 3, 3)`` array of face corner coordinates."""
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        tri = self.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.where(norm > 0, norm, 1.0)

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    def edges(self) -> np.ndarray:
        """Unique undirected edges as sorted ``(e, 2)`` vertex pairs."""
        return np.unique(self._half_edges(), axis=0)

    def _half_edges(self) -> np.ndarray:
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
        return np.sort(e, axis=1)

    def edge_face_counts(self) -> np.ndarray:
        if self.is_empty():
            return np.zeros(0, dtype=np.int64)
        _, counts = np.unique(self._half_edges(), axis=0, return_counts=True)
        return counts

    def is_watertight(self) -> bool:
        """True iff every edge is shared by exactly two faces."""
        counts = self.edge_face_counts()
        return bool(counts.size) and bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        if self.is_empty():
            return 0
        used = np.unique(self.faces).size
        return int(used - len(self.edges()) + self.n_faces)

    def translated(self, offset) -> "TriangleMesh":
        return TriangleMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces)

    def scaled(self, factor: float) -> "TriangleMesh":
        return TriangleMesh(self.vertices * float(factor), self.faces)


def empty_mesh() -> TriangleMesh:
    return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))


def normalize_to_unit_sphere(mesh: TriangleMesh) -> TriangleMesh:
    """Center the vertex bounding box at the origin and scale to max norm 1."""
    if mesh.n_vertices == 0 or mesh.is_empty():
        raise EmptyMesh("cannot normalize an empty mesh")
    v = mesh.vertices
    center = 0.5 * (v.min(axis=0) + v.max(axis=0))
    centered = v - center
    scale = np.sqrt((centered * centered).sum(axis=1).max())
    if scale == 0:
        raise EmptyMesh("mesh collapses to a single point")
    return TriangleMesh(centered / scale, mesh.faces)


# ---------------------------------------------------------------------------
# Wavefront OBJ


def read_obj(path) -> TriangleMesh:
    """Read ``v``/``f`` records; polygons are fan-triangulated, extra
    attributes (``f 1/2/3``) and other record types are ignored."""
    verts = []
    faces = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                for a in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[a], idx[a + 1]])
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    return TriangleMesh(v, f)


def write_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        # shortest round-trip float repr keeps coordinates bit-exact
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in (mesh.faces + 1).tolist():
            fh.write(f"f {a} {b} {c}\n")


def read_obj_vertices(path) -> np.ndarray:
    """Only the vertex records of an OBJ file, as an ``(n, 3)`` array."""
    pts = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("v "):
                pts.append([float(x) for x in line.split()[1:4]])
    return np.array(pts, dtype=np.float64).reshape(-1, 3)


def is_obj(path) -> bool:
    return os.path.splitext(str(path))[1].lower() == ".obj"


# ---------------------------------------------------------------------------
# reference shapes

_ICO_T = (1.0 + 5.0 ** 0.5) / 2.0
_ICO_VERTS = np.array([
    [-1, _ICO_T, 0], [1, _ICO_T, 0], [-1, -_ICO_T, 0], [1, -_ICO_T, 0],
    [0, -1, _ICO_T], [0, 1, _ICO_T], [0, -1, -_ICO_T], [0, 1, -_ICO_T],
    [_ICO_T, 0, -1], [_ICO_T, 0, 1], [-_ICO_T, 0, -1], [-_ICO_T, 0, 1],
], dtype=np.float64)
_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=np.int64)


def icosphere(subdivisions: int = 4, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Subdivided icosahedron; ``subdivisions=4`` gives 2562 vertices."""
    verts = _ICO_VERTS / np.linalg.norm(_ICO_VERTS, axis=1, keepdims=True)
    faces = _ICO_FACES.copy()
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mid = verts[uniq[:, 0]] + verts[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        base = len(verts)
        m = len(faces)
        a = base + inv[:m]
        b = base + inv[m:2 * m]
        c = base + inv[2 * m:]
        v0, v1, v2 = faces.T
        faces = np.concatenate([
            np.stack([v0, a, c], axis=1),
            np.stack([v1, b, a], axis=1),
            np.stack([v2, c, b], axis=1),
            np.stack([a, b, c], axis=1),
        ])
        verts = np.concatenate([verts, mid])
    return TriangleMesh(verts * radius + np.asarray(center, dtype=np.float64), faces)


def torus_mesh(major: float = 0.5, minor: float = 0.2, n_major: int = 64, n_minor: int = 32) -> TriangleMesh:
    """Parametric torus around the z axis with outward winding."""
    u = 2 * np.pi * np.arange(n_major) / n_major
    w = 2 * np.pi * np.arange(n_minor) / n_minor
    uu, ww = np.meshgrid(u, w, indexing="ij")
    ring = major + minor * np.cos(ww)
    verts = np.stack([ring * np.cos(uu), ring * np.sin(uu), minor * np.sin(ww)], axis=-1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    i1 = (i + 1) % n_major
    j1 = (j + 1) % n_minor
    a = (i * n_minor + j).ravel()
    b = (i1 * n_minor + j).ravel()
    c = (i1 * n_minor + j1).ravel()
    d = (i * n_minor + j1).ravel()
    faces = np.concatenate([np.stack([a, b, c], axis=1), np.stack([a, c, d], axis=1)])
    return TriangleMesh(verts, faces)


def box_mesh(half=1.0) -> TriangleMesh:
    """Closed axis-aligned cube with corners at ``(+-half, +-half, +-half)``."""
    h = float(half)
    verts = np.array([[x, y, z] for z in (-h, h) for y in (-h, h) for x in (-h, h)])
    faces = np.array([
        [0, 2, 1], [1, 2, 3], [4, 5, 6], [5, 7, 6],
        [0, 1, 4], [1, 5, 4], [2, 6, 3], [3, 6, 7],
        [0, 4, 2], [2, 4, 6], [1, 3, 5], [3, 7, 5],
    ])
    return TriangleMesh(verts, faces)
