"""BVH ray casting returning the k nearest direct hits and near misses.

A *direct* hit is a watertight ray/triangle intersection at ``t >= 0``. A
*near miss* is a triangle that the ray does not hit but passes within
distance ``r`` of; it is reported at the ray point closest to the triangle
together with the squared distance. Each face produces at most one hit per
ray and the ``k`` hits with smallest ``(t, face)`` are kept, sorted.

The hot loops are numba kernels; the Python wrappers hold the contracts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np
from numba import njit, prange

from .errors import DegenerateTriangle, EmptyMesh
from .mesh import TriangleMesh

DIRECT = 0
NEAR_MISS = 1

DEFAULT_K = 8
DEFAULT_RADIUS = 0.02
LEAF_SIZE = 4
DET_EPS = 1e-12
MIN_AREA = 1e-14
_STACK = 128

# closest-feature codes for nearest_on_triangle
FEATURE_FACE = 0  # interior; edges are 1 (v0-v1), 2 (v1-v2), 3 (v2-v0)


# ---------------------------------------------------------------------------
# BVH construction


@njit(cache=True)
def _build_kernel(lo_f, hi_f, cen, leaf_size):
    m = lo_f.shape[0]
    cap = 2 * m + 1
    node_lo = np.empty((cap, 3))
    node_hi = np.empty((cap, 3))
    left = -np.ones(cap, dtype=np.int64)
    right = -np.ones(cap, dtype=np.int64)
    start = np.zeros(cap, dtype=np.int64)
    count = np.zeros(cap, dtype=np.int64)
    order = np.arange(m)
    st_node = np.empty(cap, dtype=np.int64)
    st_a = np.empty(cap, dtype=np.int64)
    st_b = np.empty(cap, dtype=np.int64)
    n_nodes = 1
    sp = 0
    st_node[0] = 0
    st_a[0] = 0
    st_b[0] = m
    sp = 1
    while sp > 0:
        sp -= 1
        node = st_node[sp]
        a = st_a[sp]
        b = st_b[sp]
        for ax in range(3):
            node_lo[node, ax] = np.inf
            node_hi[node, ax] = -np.inf
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for i in range(a, b):
            f = order[i]
            for ax in range(3):
                node_lo[node, ax] = min(node_lo[node, ax], lo_f[f, ax])
                node_hi[node, ax] = max(node_hi[node, ax], hi_f[f, ax])
                clo[ax] = min(clo[ax], cen[f, ax])
                chi[ax] = max(chi[ax], cen[f, ax])
        if b - a <= leaf_size:
            start[node] = a
            count[node] = b - a
            continue
        axis = 0
        ext = chi[0] - clo[0]
        for ax in range(1, 3):
            if chi[ax] - clo[ax] > ext:
                ext = chi[ax] - clo[ax]
                axis = ax
        seg = order[a:b].copy()
        keys = np.empty(b - a)
        for i in range(b - a):
            keys[i] = cen[seg[i], axis]
        perm = np.argsort(keys, kind="mergesort")
        for i in range(b - a):
            order[a + i] = seg[perm[i]]
        mid = (a + b) // 2
        l_node = n_nodes
        r_node = n_nodes + 1
        n_nodes += 2
        left[node] = l_node
        right[node] = r_node
        st_node[sp] = r_node
        st_a[sp] = mid
        st_b[sp] = b
        sp += 1
        st_node[sp] = l_node
        st_a[sp] = a
        st_b[sp] = mid
        sp += 1
    return (node_lo[:n_nodes].copy(), node_hi[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), start[:n_nodes].copy(), count[:n_nodes].copy(), order)


@dataclass(frozen=True, eq=False)
class Bvh:
    """Axis-aligned bounding volume hierarchy over the faces of ``mesh``.

    Leaves hold at most four faces (``order[start:start + count]``); inner
    nodes have ``count == 0`` and two children.
    """

    mesh: TriangleMesh
    tri: np.ndarray
    face_ok: np.ndarray
    node_lo: np.ndarray
    node_hi: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    order: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_lo)

    def leaves(self) -> np.ndarray:
        return np.nonzero(self.count > 0)[0]


def build_bvh(mesh: TriangleMesh) -> Bvh:
    if mesh.is_empty():
        raise EmptyMesh("cannot build a BVH over an empty mesh")
    tri = np.ascontiguousarray(mesh.triangles())
    lo = tri.min(axis=1)
    hi = tri.max(axis=1)
    cen = tri.mean(axis=1)
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    face_ok = area >= MIN_AREA
    parts = _build_kernel(lo, hi, cen, LEAF_SIZE)
    return Bvh(mesh, tri, face_ok, *parts)


# ---------------------------------------------------------------------------
# primitives


@njit(cache=True, inline="always")
def _dot(ax, ay, az, bx, by, bz):
    return ax * bx + ay * by + az * bz


@njit(cache=True)
def _nearest_on_tri(px, py, pz, t, f):
    """Closest point of triangle ``t[f]`` to p.

    Returns (qx, qy, qz, sq_dist, feature, b0, b1, b2, edge_t) where b are the
    barycentric coordinates of the closest point.
    """
    ax, ay, az = t[f, 0, 0], t[f, 0, 1], t[f, 0, 2]
    bx, by, bz = t[f, 1, 0], t[f, 1, 1], t[f, 1, 2]
    cx, cy, cz = t[f, 2, 0], t[f, 2, 1], t[f, 2, 2]
    e1x, e1y, e1z = bx - ax, by - ay, bz - az
    e2x, e2y, e2z = cx - ax, cy - ay, cz - az
    nx = e1y * e2z - e1z * e2y
    ny = e1z * e2x - e1x * e2z
    nz = e1x * e2y - e1y * e2x
    nn = nx * nx + ny * ny + nz * nz
    # signed sub-areas of p against each edge, measured along n
    ux, uy, uz = bx - px, by - py, bz - pz
    vx, vy, vz = cx - px, cy - py, cz - pz
    wx, wy, wz = ax - px, ay - py, az - pz
    b0 = _dot(uy * vz - uz * vy, uz * vx - ux * vz, ux * vy - uy * vx, nx, ny, nz) / nn
    b1 = _dot(vy * wz - vz * wy, vz * wx - vx * wz, vx * wy - vy * wx, nx, ny, nz) / nn
    b2 = 1.0 - b0 - b1
    if b0 >= 0.0 and b1 >= 0.0 and b2 >= 0.0:
        h = _dot(px - ax, py - ay, pz - az, nx, ny, nz) / nn
        qx = px - h * nx
        qy = py - h * ny
        qz = pz - h * nz
        return qx, qy, qz, h * h * nn, FEATURE_FACE, b0, b1, b2, 0.0
    best = np.inf
    rq = (0.0, 0.0, 0.0)
    rfeat = 1
    rt = 0.0
    for e in range(3):
        sx, sy, sz = t[f, e, 0], t[f, e, 1], t[f, e, 2]
        ex = t[f, (e + 1) % 3, 0] - sx
        ey = t[f, (e + 1) % 3, 1] - sy
        ez = t[f, (e + 1) % 3, 2] - sz
        n = ex * ex + ey * ey + ez * ez
        s = _dot(px - sx, py - sy, pz - sz, ex, ey, ez) / n
        s = min(max(s, 0.0), 1.0)
        qx = sx + s * ex
        qy = sy + s * ey
        qz = sz + s * ez
        d2 = (px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2
        if d2 < best:
            best = d2
            rq = (qx, qy, qz)
            rfeat = e + 1
            rt = s
    if rfeat == 1:
        b0, b1, b2 = 1.0 - rt, rt, 0.0
    elif rfeat == 2:
        b0, b1, b2 = 0.0, 1.0 - rt, rt
    else:
        b0, b1, b2 = rt, 0.0, 1.0 - rt
    return rq[0], rq[1], rq[2], best, rfeat, b0, b1, b2, rt


@njit(cache=True)
def _watertight(ox, oy, oz, d, t, f):
    """Watertight ray/triangle test. Returns (det, T, U, V, W) unnormalized;
    det == 0 signals no intersection."""
    adx, ady, adz = abs(d[0]), abs(d[1]), abs(d[2])
    kz = 0
    if ady > adx and ady >= adz:
        kz = 1
    elif adz > adx and adz > ady:
        kz = 2
    kx = (kz + 1) % 3
    ky = (kx + 1) % 3
    if d[kz] < 0.0:
        kx, ky = ky, kx
    sx = d[kx] / d[kz]
    sy = d[ky] / d[kz]
    sz = 1.0 / d[kz]
    o = (ox, oy, oz)
    a_x = t[f, 0, kx] - o[kx]
    a_y = t[f, 0, ky] - o[ky]
    a_z = t[f, 0, kz] - o[kz]
    b_x = t[f, 1, kx] - o[kx]
    b_y = t[f, 1, ky] - o[ky]
    b_z = t[f, 1, kz] - o[kz]
    c_x = t[f, 2, kx] - o[kx]
    c_y = t[f, 2, ky] - o[ky]
    c_z = t[f, 2, kz] - o[kz]
    ax_ = a_x - sx * a_z
    ay_ = a_y - sy * a_z
    bx_ = b_x - sx * b_z
    by_ = b_y - sy * b_z
    cx_ = c_x - sx * c_z
    cy_ = c_y - sy * c_z
    u = cx_ * by_ - cy_ * bx_
    v = ax_ * cy_ - ay_ * cx_
    w = bx_ * ay_ - by_ * ax_
    if (u < 0.0 or v < 0.0 or w < 0.0) and (u > 0.0 or v > 0.0 or w > 0.0):
        return 0.0, 0.0, 0.0, 0.0, 0.0
    det = u + v + w
    if det == 0.0:
        return 0.0, 0.0, 0.0, 0.0, 0.0
    tt = u * sz * a_z + v * sz * b_z + w * sz * c_z
    return det, tt, u, v, w


@njit(cache=True)
def _ray_segment_t(ox, oy, oz, d, sx, sy, sz, ex, ey, ez):
    """Ray parameter (>= 0) of the point closest to segment s + [0,1] e."""
    wx, wy, wz = sx - ox, sy - oy, sz - oz
    a = ex * ex + ey * ey + ez * ez
    b = ex * d[0] + ey * d[1] + ez * d[2]
    dd = ex * wx + ey * wy + ez * wz
    e = d[0] * wx + d[1] * wy + d[2] * wz
    denom = a - b * b
    s = 0.0
    if denom > 1e-300:
        s = (b * e - dd) / denom
    s = min(max(s, 0.0), 1.0)
    tr = e + b * s
    if tr < 0.0:
        tr = 0.0
    return tr


@njit(cache=True)
def _test_face(ox, oy, oz, d, t, f, r2):
    """Classify one face against a ray.

    Returns (kind, t, px, py, pz, b0, b1, b2, sq_dist, feature, edge_t) with
    kind -1 when the face is neither hit nor near-missed.
    """
    det, tt, u, v, w = _watertight(ox, oy, oz, d, t, f)
    if abs(det) >= DET_EPS:
        th = tt / det
        if th >= 0.0:
            b0 = u / det
            b1 = v / det
            b2 = w / det
            px = b0 * t[f, 0, 0] + b1 * t[f, 1, 0] + b2 * t[f, 2, 0]
            py = b0 * t[f, 0, 1] + b1 * t[f, 1, 1] + b2 * t[f, 2, 1]
            pz = b0 * t[f, 0, 2] + b1 * t[f, 1, 2] + b2 * t[f, 2, 2]
            return DIRECT, th, px, py, pz, b0, b1, b2, 0.0, -1, 0.0
    # near miss: ray points closest to each edge, plus the origin
    best_d2 = np.inf
    best_t = 0.0
    res = (0.0, 0.0, 0.0, 0.0, 0, 0.0, 0.0, 0.0, 0.0)
    for c in range(4):
        if c < 3:
            sx, sy, sz = t[f, c, 0], t[f, c, 1], t[f, c, 2]
            tc = _ray_segment_t(ox, oy, oz, d, sx, sy, sz,
                                t[f, (c + 1) % 3, 0] - sx, t[f, (c + 1) % 3, 1] - sy,
                                t[f, (c + 1) % 3, 2] - sz)
        else:
            tc = 0.0
        px = ox + tc * d[0]
        py = oy + tc * d[1]
        pz = oz + tc * d[2]
        q = _nearest_on_tri(px, py, pz, t, f)
        if q[3] < best_d2 or (q[3] == best_d2 and tc < best_t):
            best_d2 = q[3]
            best_t = tc
            res = q
    if best_d2 > 0.0 and best_d2 <= r2:
        px = ox + best_t * d[0]
        py = oy + best_t * d[1]
        pz = oz + best_t * d[2]
        return NEAR_MISS, best_t, px, py, pz, res[5], res[6], res[7], best_d2, res[4], res[8]
    return -1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0, 0.0


@njit(cache=True)
def _insert(ray, k, n, f, hit, o_face, o_kind, o_t, o_pt, o_bary, o_sqd, o_feat, o_et):
    """Insert a hit into the sorted top-k list of ``ray``; returns new count."""
    th = hit[1]
    if n == k:
        lt = o_t[ray, k - 1]
        if th > lt or (th == lt and f > o_face[ray, k - 1]):
            return n
        pos = k - 1
    else:
        pos = n
        n += 1
    while pos > 0 and (o_t[ray, pos - 1] > th or (o_t[ray, pos - 1] == th and o_face[ray, pos - 1] > f)):
        o_face[ray, pos] = o_face[ray, pos - 1]
        o_kind[ray, pos] = o_kind[ray, pos - 1]
        o_t[ray, pos] = o_t[ray, pos - 1]
        o_sqd[ray, pos] = o_sqd[ray, pos - 1]
        o_feat[ray, pos] = o_feat[ray, pos - 1]
        o_et[ray, pos] = o_et[ray, pos - 1]
        for a in range(3):
            o_pt[ray, pos, a] = o_pt[ray, pos - 1, a]
            o_bary[ray, pos, a] = o_bary[ray, pos - 1, a]
        pos -= 1
    o_face[ray, pos] = f
    o_kind[ray, pos] = hit[0]
    o_t[ray, pos] = th
    o_pt[ray, pos, 0] = hit[2]
    o_pt[ray, pos, 1] = hit[3]
    o_pt[ray, pos, 2] = hit[4]
    o_bary[ray, pos, 0] = hit[5]
    o_bary[ray, pos, 1] = hit[6]
    o_bary[ray, pos, 2] = hit[7]
    o_sqd[ray, pos] = hit[8]
    o_feat[ray, pos] = hit[9]
    o_et[ray, pos] = hit[10]
    return n


@njit(cache=True)
def _slab(ox, oy, oz, d, lo, hi, node, pad):
    """Entry/exit parameters of the ray against the padded box; tn > tf on miss."""
    tn = 0.0
    tf = np.inf
    o = (ox, oy, oz)
    for a in range(3):
        l = lo[node, a] - pad
        h = hi[node, a] + pad
        if d[a] == 0.0:
            if o[a] < l or o[a] > h:
                return 1.0, 0.0
        else:
            inv = 1.0 / d[a]
            t0 = (l - o[a]) * inv
            t1 = (h - o[a]) * inv
            if t0 > t1:
                t0, t1 = t1, t0
            if t0 > tn:
                tn = t0
            if t1 < tf:
                tf = t1
            if tn > tf:
                return 1.0, 0.0
    return tn, tf


def _alloc(n, k):
    return (-np.ones((n, k), dtype=np.int64), -np.ones((n, k), dtype=np.int8),
            np.full((n, k), np.inf), np.zeros((n, k, 3)), np.zeros((n, k, 3)),
            np.zeros((n, k)), -np.ones((n, k), dtype=np.int8), np.zeros((n, k)),
            np.zeros(n, dtype=np.int64))


@njit(cache=True, parallel=True)
def _trace_bvh(orig, dirs, valid, k, r, t, face_ok, lo, hi, left, right, start, count, order,
               o_face, o_kind, o_t, o_pt, o_bary, o_sqd, o_feat, o_et, o_n):
    r2 = r * r
    for ray in prange(orig.shape[0]):
        if not valid[ray]:
            continue
        ox, oy, oz = orig[ray, 0], orig[ray, 1], orig[ray, 2]
        d = dirs[ray]
        stack = np.empty(_STACK, dtype=np.int64)
        stack[0] = 0
        sp = 1
        n = 0
        while sp > 0:
            sp -= 1
            node = stack[sp]
            tn, tf = _slab(ox, oy, oz, d, lo, hi, node, r)
            if tn > tf:
                continue
            if n == k and tn > o_t[ray, k - 1]:
                continue
            if count[node] > 0:
                for i in range(start[node], start[node] + count[node]):
                    f = order[i]
                    if not face_ok[f]:
                        continue
                    hit = _test_face(ox, oy, oz, d, t, f, r2)
                    if hit[0] >= 0:
                        n = _insert(ray, k, n, f, hit, o_face, o_kind, o_t, o_pt, o_bary,
                                    o_sqd, o_feat, o_et)
            else:
                a = left[node]
                b = right[node]
                ta, _ = _slab(ox, oy, oz, d, lo, hi, a, r)
                tb, _ = _slab(ox, oy, oz, d, lo, hi, b, r)
                # push the farther child first so the nearer one is popped next
                if ta <= tb:
                    stack[sp] = b
                    stack[sp + 1] = a
                else:
                    stack[sp] = a
                    stack[sp + 1] = b
                sp += 2
        o_n[ray] = n


@njit(cache=True, parallel=True)
def _trace_brute(orig, dirs, valid, k, r, t, face_ok,
                 o_face, o_kind, o_t, o_pt, o_bary, o_sqd, o_feat, o_et, o_n):
    r2 = r * r
    for ray in prange(orig.shape[0]):
        if not valid[ray]:
            continue
        ox, oy, oz = orig[ray, 0], orig[ray, 1], orig[ray, 2]
        d = dirs[ray]
        n = 0
        for f in range(t.shape[0]):
            if not face_ok[f]:
                continue
            hit = _test_face(ox, oy, oz, d, t, f, r2)
            if hit[0] >= 0:
                n = _insert(ray, k, n, f, hit, o_face, o_kind, o_t, o_pt, o_bary, o_sqd, o_feat, o_et)
        o_n[ray] = n


@dataclass(frozen=True, eq=False)
class HitBuffer:
    """Top-k hits for a batch of rays, padded with ``face == -1``.

    ``point`` is the hit point for direct hits and the closest ray point for
    near misses. ``bary`` holds the ray barycentrics of a direct hit, or
    the barycentrics of the closest triangle point for a near miss.
    ``feature``/``edge_t`` say which part of the triangle was closest
    (0 interior, 1..3 edges) and the clamped edge parameter.
    """

    face: np.ndarray
    kind: np.ndarray
    t: np.ndarray
    point: np.ndarray
    bary: np.ndarray
    sq_dist: np.ndarray
    feature: np.ndarray
    edge_t: np.ndarray
    count: np.ndarray

    @property
    def k(self) -> int:
        return self.face.shape[1]


@dataclass
class Hit:
    face_index: int
    kind: str
    point: np.ndarray
    t: float
    bary: np.ndarray
    sq_dist: float


def _prep_rays(origins, directions, valid):
    o = np.ascontiguousarray(np.asarray(origins, dtype=np.float64).reshape(-1, 3))
    d = np.ascontiguousarray(np.asarray(directions, dtype=np.float64).reshape(-1, 3))
    if valid is None:
        valid = np.ones(len(o), dtype=bool)
    return o, d, np.ascontiguousarray(np.asarray(valid, dtype=bool))


def _check_args(k, r):
    if k < 1:
        raise ValueError("k must be >= 1")
    if r < 0:
        raise ValueError("r must be >= 0")


def intersect_rays(bvh: Bvh, origins, directions, k: int = DEFAULT_K, r: float = DEFAULT_RADIUS,
                   valid=None) -> HitBuffer:
    """Batch ``ray_intersect_k`` over many rays (directions must be unit)."""
    _check_args(k, r)
    o, d, valid = _prep_rays(origins, directions, valid)
    out = _alloc(len(o), k)
    _trace_bvh(o, d, valid, int(k), float(r), bvh.tri, bvh.face_ok, bvh.node_lo, bvh.node_hi,
               bvh.left, bvh.right, bvh.start, bvh.count, bvh.order, *out)
    return HitBuffer(*out)


def intersect_rays_bruteforce(mesh: TriangleMesh, origins, directions, k: int = DEFAULT_K,
                              r: float = DEFAULT_RADIUS, valid=None) -> HitBuffer:
    """Reference implementation testing every face against every ray."""
    _check_args(k, r)
    o, d, valid = _prep_rays(origins, directions, valid)
    tri = np.ascontiguousarray(mesh.triangles())
    area = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    out = _alloc(len(o), k)
    _trace_brute(o, d, valid, int(k), float(r), tri, area >= MIN_AREA, *out)
    return HitBuffer(*out)


def hits_for_ray(buf: HitBuffer, i: int) -> list:
    out = []
    for j in range(buf.count[i]):
        kind = "direct" if buf.kind[i, j] == DIRECT else "near_miss"
        out.append(Hit(int(buf.face[i, j]), kind, buf.point[i, j].copy(), float(buf.t[i, j]),
                       buf.bary[i, j].copy() if kind == "direct" else None, float(buf.sq_dist[i, j])))
    return out


def ray_intersect_k(bvh: Bvh, ray, k: int = DEFAULT_K, r: float = DEFAULT_RADIUS) -> list:
    """The ``k`` nearest hits (direct or near miss) along one six-tuple ray."""
    ray = np.asarray(ray, dtype=np.float64).reshape(6)
    buf = intersect_rays(bvh, ray[None, :3], ray[None, 3:], k, r)
    return hits_for_ray(buf, 0)


def nearest_on_triangle(p, tri):
    """Closest point of a triangle to ``p`` and its squared distance."""
    tri = np.ascontiguousarray(np.asarray(tri, dtype=np.float64).reshape(1, 3, 3))
    area = 0.5 * np.linalg.norm(np.cross(tri[0, 1] - tri[0, 0], tri[0, 2] - tri[0, 0]))
    if area < MIN_AREA:
        raise DegenerateTriangle(f"triangle area {area:.3g} below {MIN_AREA}")
    p = np.asarray(p, dtype=np.float64).reshape(3)
    q = _nearest_on_tri(p[0], p[1], p[2], tri, 0)
    return np.array(q[:3]), float(q[3])


def nearest_on_triangle_batch(p, tri):
    """Vectorized closest points of ``tri[i]`` to ``p[i]``.

    Returns ``(closest (n,3), sq_dist (n,), feature (n,), bary (n,3), edge_t (n,))``
    with the same case split as the scalar kernel: projection onto the plane
    when it lands inside, otherwise the best clamped edge projection.
    """
    p = np.asarray(p, dtype=np.float64)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    n = np.cross(b - a, c - a)
    nn = (n * n).sum(axis=1)
    b0 = (np.cross(b - p, c - p) * n).sum(axis=1) / nn
    b1 = (np.cross(c - p, a - p) * n).sum(axis=1) / nn
    b2 = 1.0 - b0 - b1
    inside = (b0 >= 0) & (b1 >= 0) & (b2 >= 0)
    h = ((p - a) * n).sum(axis=1) / nn
    q_face = p - h[:, None] * n
    d_face = h * h * nn

    best = np.full(len(p), np.inf)
    q = np.zeros_like(p)
    feat = np.zeros(len(p), dtype=np.int64)
    et = np.zeros(len(p))
    for e in range(3):
        s = tri[:, e]
        ev = tri[:, (e + 1) % 3] - s
        te = np.clip(((p - s) * ev).sum(axis=1) / (ev * ev).sum(axis=1), 0.0, 1.0)
        qe = s + te[:, None] * ev
        de = ((p - qe) ** 2).sum(axis=1)
        better = de < best
        best = np.where(better, de, best)
        q = np.where(better[:, None], qe, q)
        feat = np.where(better, e + 1, feat)
        et = np.where(better, te, et)
    bary = np.zeros_like(p)
    for e in range(3):
        m = feat == e + 1
        bary[m, e] = 1.0 - et[m]
        bary[m, (e + 1) % 3] = et[m]
    q = np.where(inside[:, None], q_face, q)
    best = np.where(inside, d_face, best)
    feat = np.where(inside, FEATURE_FACE, feat)
    et = np.where(inside, 0.0, et)
    bary = np.where(inside[:, None], np.stack([b0, b1, b2], axis=1), bary)
    return q, best, feat, bary, et


# ---------------------------------------------------------------------------
# closest-point and occlusion queries


@njit(cache=True)
def _box_d2(px, py, pz, lo, hi, node):
    d2 = 0.0
    p = (px, py, pz)
    for a in range(3):
        if p[a] < lo[node, a]:
            d2 += (lo[node, a] - p[a]) ** 2
        elif p[a] > hi[node, a]:
            d2 += (p[a] - hi[node, a]) ** 2
    return d2


@njit(cache=True, parallel=True)
def _closest_kernel(pts, t, face_ok, lo, hi, left, right, start, count, order, o_d2, o_face, o_q):
    for i in prange(pts.shape[0]):
        px, py, pz = pts[i, 0], pts[i, 1], pts[i, 2]
        stack = np.empty(_STACK, dtype=np.int64)
        stack[0] = 0
        sp = 1
        best = np.inf
        bf = -1
        bq = (0.0, 0.0, 0.0)
        while sp > 0:
            sp -= 1
            node = stack[sp]
            if _box_d2(px, py, pz, lo, hi, node) > best:
                continue
            if count[node] > 0:
                for j in range(start[node], start[node] + count[node]):
                    f = order[j]
                    if not face_ok[f]:
                        continue
                    q = _nearest_on_tri(px, py, pz, t, f)
                    if q[3] < best or (q[3] == best and f < bf):
                        best = q[3]
                        bf = f
                        bq = (q[0], q[1], q[2])
            else:
                a = left[node]
                b = right[node]
                if _box_d2(px, py, pz, lo, hi, a) <= _box_d2(px, py, pz, lo, hi, b):
                    stack[sp] = b
                    stack[sp + 1] = a
                else:
                    stack[sp] = a
                    stack[sp + 1] = b
                sp += 2
        o_d2[i] = best
        o_face[i] = bf
        o_q[i, 0] = bq[0]
        o_q[i, 1] = bq[1]
        o_q[i, 2] = bq[2]


def closest_points(bvh: Bvh, points):
    """Squared distance, face index and closest surface point per query point."""
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    d2 = np.empty(len(pts))
    face = np.empty(len(pts), dtype=np.int64)
    q = np.empty((len(pts), 3))
    _closest_kernel(pts, bvh.tri, bvh.face_ok, bvh.node_lo, bvh.node_hi, bvh.left, bvh.right,
                    bvh.start, bvh.count, bvh.order, d2, face, q)
    return d2, face, q


@njit(cache=True, parallel=True)
def _count_kernel(orig, dirs, tmin, tmax, stop_at, t, face_ok, lo, hi, left, right, start, count,
                  order, out):
    for i in prange(orig.shape[0]):
        ox, oy, oz = orig[i, 0], orig[i, 1], orig[i, 2]
        d = dirs[i]
        stack = np.empty(_STACK, dtype=np.int64)
        stack[0] = 0
        sp = 1
        n = 0
        while sp > 0 and not (stop_at > 0 and n >= stop_at):
            sp -= 1
            node = stack[sp]
            tn, tf = _slab(ox, oy, oz, d, lo, hi, node, 0.0)
            if tn > tf or tn > tmax[i]:
                continue
            if count[node] > 0:
                for j in range(start[node], start[node] + count[node]):
                    f = order[j]
                    if not face_ok[f]:
                        continue
                    det, tt, u, v, w = _watertight(ox, oy, oz, d, t, f)
                    if abs(det) >= DET_EPS:
                        th = tt / det
                        if th > tmin and th < tmax[i]:
                            n += 1
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2
        out[i] = n


def count_direct_hits(bvh: Bvh, origins, directions, tmin: float = 0.0, tmax=None, stop_at: int = 0):
    """Number of direct intersections with ``tmin < t < tmax`` along each ray.

    ``stop_at > 0`` ends traversal early once that many hits are found.
    """
    o, d, _ = _prep_rays(origins, directions, None)
    if tmax is None:
        tmax = np.full(len(o), np.inf)
    tmax = np.ascontiguousarray(np.broadcast_to(np.asarray(tmax, dtype=np.float64), (len(o),)))
    out = np.zeros(len(o), dtype=np.int64)
    _count_kernel(o, d, float(tmin), tmax, int(stop_at), bvh.tri, bvh.face_ok, bvh.node_lo,
                  bvh.node_hi, bvh.left, bvh.right, bvh.start, bvh.count, bvh.order, out)
    return out


def set_threads(n: int) -> int:
    """Limit the numba worker pool; returns the count actually applied."""
    n = max(1, min(int(n), numba.config.NUMBA_NUM_THREADS))
    numba.set_num_threads(n)
    return n
