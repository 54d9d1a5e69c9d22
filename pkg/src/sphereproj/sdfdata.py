"""Signed-distance training data from triangle meshes.

Signs come from visibility: a point is outside when the open segment to at
least one camera crosses no triangle. This needs no watertightness, so
open or self-intersecting scans still get usable labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyMesh
from .mesh import TriangleMesh
from .metrics import sample_surface
from .raycast import Bvh, build_bvh, closest_points, count_direct_hits

DEFAULT_VIEWS = 50
CAMERA_RADIUS = 2.0
DEFAULT_OFFSET = 2e-3
DEFAULT_SIGMAS = (0.005, 0.0005)
DEFAULT_THRESHOLD = 0.005
SEGMENT_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class SdfSampleSet:
    points: np.ndarray
    signed_distances: np.ndarray
    raw_distances: np.ndarray = None
    offset: float = 0.0

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(self.signed_distances, dtype=np.float64).ravel()
        if len(p) != len(d):
            raise ValueError(f"{len(p)} points but {len(d)} distances")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(d))):
            raise ValueError("sample set has non-finite entries")
        raw = d + self.offset if self.raw_distances is None else np.asarray(self.raw_distances, dtype=np.float64)
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "signed_distances", d)
        object.__setattr__(self, "raw_distances", raw)

    def __len__(self):
        return len(self.points)


def camera_ring(n_views: int = DEFAULT_VIEWS, radius: float = CAMERA_RADIUS) -> np.ndarray:
    """Fibonacci-spiral camera positions on a sphere of ``radius``."""
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    i = np.arange(n_views) + 0.5
    z = 1.0 - 2.0 * i / n_views
    rho = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = np.pi * (3.0 - np.sqrt(5.0)) * np.arange(n_views)
    d = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return radius * d


def visibility_signs(bvh: Bvh, points, cameras) -> np.ndarray:
    """+1 for points seen by any camera through an unobstructed open segment, else -1."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cams = np.asarray(cameras, dtype=np.float64).reshape(-1, 3)
    sign = -np.ones(len(p))
    todo = np.arange(len(p))
    for c in cams:
        if todo.size == 0:
            break
        seg = c[None, :] - p[todo]
        length = np.linalg.norm(seg, axis=1)
        ok = length > SEGMENT_EPS
        dirs = seg / np.where(ok, length, 1.0)[:, None]
        hits = count_direct_hits(bvh, p[todo], dirs, SEGMENT_EPS, length, stop_at=1)
        seen = ok & (hits == 0)
        sign[todo[seen]] = 1.0
        todo = todo[~seen]
    return sign


def sign_by_visibility(bvh: Bvh, p, cameras) -> int:
    return int(visibility_signs(bvh, np.asarray(p, dtype=np.float64).reshape(1, 3), cameras)[0])


def parity_signs(bvh: Bvh, points, direction=(0.267, 0.534, 0.802)) -> np.ndarray:
    """-1 where a ray from the point crosses the surface an odd number of times.

    Only meaningful for watertight meshes; used as an independent check of
    the visibility signs.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(direction, dtype=np.float64)
    d = np.broadcast_to(d / np.linalg.norm(d), p.shape)
    hits = count_direct_hits(bvh, p, d, 0.0)
    return np.where(hits % 2 == 1, -1.0, 1.0)


def unsigned_distances(bvh: Bvh, points) -> np.ndarray:
    d2, _, _ = closest_points(bvh, np.asarray(points, dtype=np.float64).reshape(-1, 3))
    return np.sqrt(d2)


def signed_distances(bvh: Bvh, points, cameras) -> np.ndarray:
    return visibility_signs(bvh, points, cameras) * unsigned_distances(bvh, points)


def signed_distance(bvh: Bvh, p, cameras) -> float:
    return float(signed_distances(bvh, np.asarray(p, dtype=np.float64).reshape(1, 3), cameras)[0])


def uniform_in_ball(n: int, rng) -> np.ndarray:
    d = rng.normal(size=(n, 3))
    d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-300)
    r = rng.random(n) ** (1.0 / 3.0)
    return d * r[:, None]


def sample_training_points(mesh: TriangleMesh, n_near: int = 9500, n_uniform: int = 500,
                           sigmas=DEFAULT_SIGMAS, seed=0, offset: float = DEFAULT_OFFSET,
                           n_views: int = DEFAULT_VIEWS, bvh: Bvh = None) -> SdfSampleSet:
    """Near-surface Gaussian samples (half at each sigma) plus uniform samples
    in the unit ball, labelled ``signed_distance - offset``."""
    if mesh.is_empty():
        raise EmptyMesh("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    surf = sample_surface(mesh, n_near, seed=rng)
    n1 = (n_near + 1) // 2
    scale = np.concatenate([np.full(n1, sigmas[0]), np.full(n_near - n1, sigmas[1])])
    near = surf + rng.normal(size=(n_near, 3)) * scale[:, None]
    pts = np.concatenate([near, uniform_in_ball(n_uniform, rng)])
    bvh = bvh or build_bvh(mesh)
    raw = signed_distances(bvh, pts, camera_ring(n_views))
    return SdfSampleSet(pts, raw - offset, raw, float(offset))


def inside_fraction(sample_set: SdfSampleSet) -> float:
    return float(np.mean(sample_set.raw_distances < 0))


def inside_fraction_filter(sample_set: SdfSampleSet, threshold: float = DEFAULT_THRESHOLD) -> bool:
    """Keep (True) when at least ``threshold`` of the raw labels are negative."""
    if len(sample_set) == 0:
        raise ValueError("empty sample set")
    return inside_fraction(sample_set) >= threshold


def write_samples(path, sample_set: SdfSampleSet) -> None:
    rec = np.concatenate([sample_set.points, sample_set.signed_distances[:, None]], axis=1)
    with open(path, "wb") as fh:
        fh.write(f"SDFSAMPLES v1 n={len(sample_set)}\n".encode("ascii"))
        fh.write(rec.astype("<f4").tobytes())


def read_samples(path) -> SdfSampleSet:
    with open(path, "rb") as fh:
        head = fh.readline().decode("ascii").split()
        if len(head) != 3 or head[:2] != ["SDFSAMPLES", "v1"] or not head[2].startswith("n="):
            raise ValueError(f"{path}: not an SDFSAMPLES v1 file")
        n = int(head[2][2:])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != 4 * n:
        raise ValueError(f"{path}: expected {n} records")
    rec = data.reshape(n, 4).astype(np.float64)
    return SdfSampleSet(rec[:, :3], rec[:, 3])
