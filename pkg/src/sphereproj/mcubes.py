"""Marching cubes over an :class:`SdfGrid`.

The 256-entry triangle table is derived at import time from the contour
that the isosurface traces on the six faces of a cell. Ambiguous faces
(diagonally opposite inside corners) always separate the inside corners.
Since that rule depends only on the four corner signs of a face, the two
cells sharing a face always produce the same boundary segments there and
the extracted surface is closed wherever it does not reach the grid
boundary.

Corner ``c`` of a cell sits at offset ``(c & 1, (c >> 1) & 1, (c >> 2) & 1)``;
bit ``c`` of the case index is set when that corner is inside
(value below the iso level).
"""

from __future__ import annotations

import numpy as np

from .grid import SdfGrid
from .mesh import TriangleMesh, empty_mesh

ISO_TIE_SHIFT = 1e-10

CORNERS = np.array([[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64)

# 12 edges as (corner, corner, axis), low corner first
EDGES = []
for _axis in range(3):
    for _c in range(8):
        if not (_c >> _axis) & 1:
            EDGES.append((_c, _c | (1 << _axis), _axis))
EDGES = np.array(EDGES, dtype=np.int64)
_EDGE_OF = {(int(a), int(b)): e for e, (a, b, _) in enumerate(EDGES)}
_EDGE_OF.update({(b, a): e for (a, b), e in list(_EDGE_OF.items())})


def _faces():
    """Six faces as (outward normal, 4 corners in cyclic order)."""
    out = []
    for axis in range(3):
        u, v = [a for a in range(3) if a != axis]
        for side in (0, 1):
            base = side << axis
            ring = [base, base | (1 << u), base | (1 << u) | (1 << v), base | (1 << v)]
            normal = np.zeros(3)
            normal[axis] = 1.0 if side else -1.0
            out.append((normal, ring))
    return out


_FACES = _faces()
_EDGE_FACES = [set() for _ in range(12)]
for _fi, (_n, _ring) in enumerate(_FACES):
    for _q in range(4):
        _EDGE_FACES[_EDGE_OF[(_ring[_q], _ring[(_q + 1) % 4])]].add(_fi)


def _edge_mid(e):
    a, b, _ = EDGES[e]
    return 0.5 * (CORNERS[a] + CORNERS[b])


def _face_segments(case):
    """Directed boundary segments (edge_from, edge_to) over all six faces.

    Segments are oriented so that, seen from outside the cell, the inside
    corner lies to the right; the resulting loops then produce triangles whose
    right-hand normal points from inside to outside.
    """
    inside = [(case >> c) & 1 for c in range(8)]
    segs = []
    for normal, ring in _FACES:
        crossing = [q for q in range(4) if inside[ring[q]] != inside[ring[(q + 1) % 4]]]
        if not crossing:
            continue
        pairs = []
        if len(crossing) == 2:
            pairs.append(tuple(crossing))
        else:
            # ambiguous face: cut off each inside corner on its own
            for q in range(4):
                if inside[ring[q]]:
                    pairs.append(((q - 1) % 4, q))
        for qa, qb in pairs:
            ea = _EDGE_OF[(ring[qa], ring[(qa + 1) % 4])]
            eb = _EDGE_OF[(ring[qb], ring[(qb + 1) % 4])]
            a = _edge_mid(ea)
            b = _edge_mid(eb)
            # any inside corner on the cut-off side of this segment
            cand = [ring[(qa + 1) % 4]] if len(crossing) == 4 else [c for c in ring if inside[c]]
            corner = CORNERS[cand[0]].astype(np.float64)
            side = np.dot(np.cross(normal, b - a), corner - a)
            if side < 0:
                segs.append((ea, eb))
            else:
                segs.append((eb, ea))
    return segs


def _loops(segs):
    nxt = {}
    for a, b in segs:
        if a in nxt:
            raise AssertionError("edge crossing used twice as a segment start")
        nxt[a] = b
    loops = []
    seen = set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        cur = nxt[start]
        while cur != start:
            loop.append(cur)
            seen.add(cur)
            cur = nxt[cur]
        loops.append(loop)
    return loops


def _share_face(ea, eb):
    return bool(_EDGE_FACES[ea] & _EDGE_FACES[eb])


def _triangulate(loop):
    """Fan triangulation, preferring an apex whose diagonals avoid pairs of
    points lying on a common cell face (those could coincide with a segment
    or diagonal of the neighbouring cell)."""
    n = len(loop)
    if n == 3:
        return [tuple(loop)]
    best = 0
    for s in range(n):
        rot = loop[s:] + loop[:s]
        if not any(_share_face(rot[0], rot[i]) for i in range(2, n - 1)):
            best = s
            break
    rot = loop[best:] + loop[:best]
    return [(rot[0], rot[i], rot[i + 1]) for i in range(1, n - 1)]


def _build_table():
    tris = []
    for case in range(256):
        t = []
        for loop in _loops(_face_segments(case)):
            t.extend(_triangulate(loop))
        tris.append(t)
    width = max(len(t) for t in tris)
    table = -np.ones((256, width, 3), dtype=np.int64)
    counts = np.zeros(256, dtype=np.int64)
    for case, t in enumerate(tris):
        counts[case] = len(t)
        if t:
            table[case, : len(t)] = np.array(t)
    return table, counts


TRI_TABLE, TRI_COUNT = _build_table()


def marching_cubes(grid: SdfGrid, iso: float = 0.0) -> TriangleMesh:
    """Extract the ``iso`` level set of ``grid`` as a triangle mesh.

    Vertices are shared between neighbouring cells (one vertex per crossed
    grid edge) and placed at the linear zero crossing of ``value - iso``.
    Node values exactly equal to ``iso`` are shifted by ``-1e-10`` first.
    Returns an empty mesh when there is no sign change.
    """
    if not np.isfinite(iso):
        raise ValueError("iso must be finite")
    f = grid.values - iso
    f = np.where(f == 0.0, -ISO_TIE_SHIFT, f)
    R = grid.resolution
    inside = f < 0
    if inside.all() or not inside.any():
        return empty_mesh()

    n = R - 1
    case = np.zeros((n, n, n), dtype=np.int64)
    for c, (dx, dy, dz) in enumerate(CORNERS):
        case |= inside[dx:dx + n, dy:dy + n, dz:dz + n].astype(np.int64) << c
    case = case.ravel()
    counts = TRI_COUNT[case]
    cells = np.nonzero(counts)[0]
    if cells.size == 0:
        return empty_mesh()
    ntri = counts[cells]
    cell_of_tri = np.repeat(cells, ntri)
    slot = np.arange(ntri.sum()) - np.repeat(np.cumsum(ntri) - ntri, ntri)
    local_edges = TRI_TABLE[case[cell_of_tri], slot]  # (T, 3)

    ci, cj, ck = np.unravel_index(cell_of_tri, (n, n, n))
    lo = EDGES[local_edges, 0]
    axis = EDGES[local_edges, 2]
    ni = ci[:, None] + CORNERS[lo, 0]
    nj = cj[:, None] + CORNERS[lo, 1]
    nk = ck[:, None] + CORNERS[lo, 2]
    # global edge id: (axis, low node)
    gid = axis * R ** 3 + (ni * R + nj) * R + nk
    uniq, inv = np.unique(gid.ravel(), return_inverse=True)
    faces = inv.reshape(-1, 3)

    e_axis = uniq // R ** 3
    node = uniq % R ** 3
    i0, j0, k0 = np.unravel_index(node, (R, R, R))
    step = np.eye(3, dtype=np.int64)[e_axis]
    f0 = f[i0, j0, k0]
    f1 = f[i0 + step[:, 0], j0 + step[:, 1], k0 + step[:, 2]]
    t = f0 / (f0 - f1)
    h = grid.spacing
    p0 = np.stack([i0, j0, k0], axis=1) * h - 1.0
    verts = p0 + t[:, None] * step * h
    return TriangleMesh(verts, faces)
