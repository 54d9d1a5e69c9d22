"""Differentiable spherical projection of triangle meshes.

For every pixel ray the forward pass records the k nearest hits on a
:class:`ProjectionTape`. Map values are then produced by *replaying* the
tape against the vertex positions:

* depth: distance from the ray origin to ``sum_q w_q v_q`` over the nearest
  direct hit, with ``w_q`` the sub-triangle area ratios of the recorded hit
  point; background when there is no direct hit.
* silhouette: ``1 - prod_j (1 - a_j)`` with ``a_j = 1`` for direct hits and
  ``exp(-d_j / delta)`` for near misses, ``d_j`` the squared distance from
  the recorded ray point to the triangle.

The backward pass differentiates exactly these replay formulas with the
recorded points held fixed, so a finite difference of :func:`replay` is
an exact oracle for :func:`project_backward`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigMismatch, ShapeMismatch, TapeReplayMismatch
from .mesh import TriangleMesh
from .raycast import DEFAULT_K, DEFAULT_RADIUS, DIRECT, NEAR_MISS, build_bvh, intersect_rays, \
    nearest_on_triangle_batch
from .sphere import DEFAULT_EPS_EQUATOR, ORTHOGRAPHIC, RADIAL, RaySet, SphereGrid, grid_from_header, \
    make_rays

DEFAULT_DELTA = 1e-4
DEFAULT_BACKGROUND = 2.0

CHANNELS = ("radial_depth", "ortho_depth", "ortho_sil", "radial_sil")
DEFAULT_CHANNELS = ("radial_depth", "ortho_depth", "ortho_sil")


@dataclass(frozen=True, eq=False)
class SphericalMap:
    grid: SphereGrid
    channels: dict
    valid: dict
    background: float = DEFAULT_BACKGROUND

    @property
    def names(self) -> list:
        return list(self.channels)

    def __getitem__(self, name):
        return self.channels[name]

    def stacked(self) -> np.ndarray:
        return np.stack([self.channels[c] for c in self.channels])


@dataclass(frozen=True, eq=False)
class ProjectionTape:
    """Everything needed to replay one projection without re-tracing."""

    rays: RaySet
    vertices: np.ndarray
    faces: np.ndarray
    face: np.ndarray
    kind: np.ndarray
    point: np.ndarray
    sq_dist: np.ndarray
    feature: np.ndarray
    edge_t: np.ndarray
    count: np.ndarray
    alpha: np.ndarray
    delta: float
    background: float
    k: int
    r: float
    checksum: str = field(default="", repr=False)

    @property
    def mode(self) -> str:
        return self.rays.mode

    @property
    def depth_slot(self) -> np.ndarray:
        """Index of the nearest direct hit per pixel, -1 when none."""
        direct = (self.kind == DIRECT) & (self.face >= 0)
        slot = np.argmax(direct, axis=1)
        return np.where(direct.any(axis=1), slot, -1)

    def compute_checksum(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for a in (self.vertices, self.faces, self.face, self.kind, self.point, self.count,
                  self.rays.origins, self.rays.directions, self.rays.valid):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(repr((self.delta, self.background, self.k, self.r)).encode())
        return h.hexdigest()

    def verify(self) -> None:
        if self.compute_checksum() != self.checksum:
            raise TapeReplayMismatch("projection tape was modified after recording")


def _freeze(*arrays):
    for a in arrays:
        a.setflags(write=False)


def _channel_names(mode):
    return f"{mode}_depth", f"{mode}_sil"


def record_tape(mesh: TriangleMesh, rays: RaySet, k: int = DEFAULT_K, r: float = DEFAULT_RADIUS,
                delta: float = DEFAULT_DELTA, background: float = DEFAULT_BACKGROUND,
                bvh=None) -> ProjectionTape:
    if delta <= 0:
        raise ValueError("delta must be positive")
    n = len(rays)
    if mesh.is_empty():
        face = -np.ones((n, k), dtype=np.int64)
        kind = -np.ones((n, k), dtype=np.int8)
        point = np.zeros((n, k, 3))
        sq = np.zeros((n, k))
        feat = -np.ones((n, k), dtype=np.int8)
        et = np.zeros((n, k))
        count = np.zeros(n, dtype=np.int64)
    else:
        if bvh is None:
            bvh = build_bvh(mesh)
        hb = intersect_rays(bvh, rays.origins, rays.directions, k, r, rays.valid)
        face, kind, point, sq, feat, et, count = (hb.face, hb.kind, hb.point, hb.sq_dist,
                                                  hb.feature, hb.edge_t, hb.count)
    verts = np.array(mesh.vertices)
    faces = np.array(mesh.faces)
    alpha = _hit_alpha(verts, faces, face, kind, point, delta)[0]
    _freeze(verts, faces, face, kind, point, sq, feat, et, count, alpha)
    tape = ProjectionTape(rays, verts, faces, face, kind, point, sq, feat, et, count, alpha,
                          float(delta), float(background), int(k), float(r))
    object.__setattr__(tape, "checksum", tape.compute_checksum())
    return tape


def _hit_alpha(vertices, faces, face, kind, point, delta):
    """Per-hit decay ``a_j`` (0 for padding) plus near-miss geometry."""
    alpha = np.zeros(face.shape)
    alpha[(kind == DIRECT) & (face >= 0)] = 1.0
    near = (kind == NEAR_MISS) & (face >= 0)
    idx = np.nonzero(near)
    geo = None
    if idx[0].size:
        tri = vertices[faces[face[idx]]]
        p = point[idx]
        q, d2, feat, bary, et = nearest_on_triangle_batch(p, tri)
        alpha[idx] = np.exp(-d2 / delta)
        geo = (idx, tri, p, q, d2, bary, feat, et)
    return alpha, geo


def _depth_terms(tape, vertices):
    slot = tape.depth_slot
    pix = np.nonzero(slot >= 0)[0]
    f = tape.face[pix, slot[pix]]
    tri = vertices[tape.faces[f]]
    p = tape.point[pix, slot[pix]]
    v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
    cA = np.cross(v1 - v0, v2 - v0)
    c0 = np.cross(v2 - v1, p - v1)
    c1 = np.cross(v0 - v2, p - v2)
    S = (cA * cA).sum(axis=1)
    # signed sub-triangle area ratios: equal to the unsigned ones inside the
    # face and smooth across its edges
    w0 = (c0 * cA).sum(axis=1) / S
    w1 = (c1 * cA).sum(axis=1) / S
    w2 = 1.0 - w1 - w0
    u = w0[:, None] * v0 + w1[:, None] * v1 + w2[:, None] * v2
    diff = u - tape.rays.origins[pix]
    depth = np.sqrt((diff * diff).sum(axis=1))
    return pix, f, tri, p, (cA, c0, c1, S, w0, w1, w2), diff, depth


def _aggregate(alpha):
    return 1.0 - np.prod(1.0 - alpha, axis=1)


def replay(tape: ProjectionTape, vertices=None) -> dict:
    """Depth and silhouette for every pixel from the tape, optionally with
    displaced ``vertices`` (recorded hit points stay fixed)."""
    v = tape.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
    n = len(tape.rays)
    depth = np.full(n, tape.background)
    pix, _, _, _, _, _, d = _depth_terms(tape, v)
    depth[pix] = d
    alpha = tape.alpha if vertices is None else _hit_alpha(v, tape.faces, tape.face, tape.kind,
                                                           tape.point, tape.delta)[0]
    sil = _aggregate(alpha)
    invalid = ~tape.rays.valid
    depth[invalid] = tape.background
    sil[invalid] = 0.0
    dname, sname = _channel_names(tape.mode)
    return {dname: depth, sname: sil}


def project_forward(mesh: TriangleMesh, rays: RaySet, k: int = DEFAULT_K, r: float = DEFAULT_RADIUS,
                    delta: float = DEFAULT_DELTA, background: float = DEFAULT_BACKGROUND,
                    grid: SphereGrid = None, bvh=None):
    """Depth and silhouette maps of ``mesh`` along ``rays`` plus the tape.

    ``grid``, when given, must be the discretization the rays were built on.
    """
    if grid is not None and not rays.grid.same_as(grid):
        raise ConfigMismatch("rays were generated for a different sphere grid")
    tape = record_tape(mesh, rays, k, r, delta, background, bvh=bvh)
    chans = replay(tape)
    valid = {name: rays.valid.copy() for name in chans}
    return SphericalMap(rays.grid, chans, valid, float(background)), tape


def _cross_dot_grads(a, b, m):
    """Gradients of ``(a x b) . m`` w.r.t. ``a`` and ``b`` for fixed ``m``."""
    return np.cross(b, m), np.cross(m, a)


def _ratio_grads(v0, v1, v2, sa, sb, p, c, cA, S, w, roles):
    """Per-corner gradients of ``w = ((sb - sa) x (p - sa)) . cA / |cA|^2``.

    ``roles[q]`` says whether corner q is ``sa`` (0), ``sb`` (1) or absent.
    """
    ga_num, gb_num = _cross_dot_grads(sb - sa, p - sa, cA)
    # through the sub-triangle cross product: a = sb - sa, b = p - sa
    d_sa = -(ga_num + gb_num)
    d_sb = ga_num
    # through cA = (v1 - v0) x (v2 - v0), in the numerator (m = c) and in S (m = 2 cA)
    m = c - 2.0 * w[:, None] * cA
    g1, g2 = _cross_dot_grads(v1 - v0, v2 - v0, m)
    via_A = (-(g1 + g2), g1, g2)
    out = []
    for q in range(3):
        d = via_A[q].copy()
        if roles[q] == 0:
            d += d_sa
        elif roles[q] == 1:
            d += d_sb
        out.append(d / S[:, None])
    return out


def project_backward(tape: ProjectionTape, map_grads: dict) -> np.ndarray:
    """Vector-Jacobian product of the tape replay w.r.t. the vertices.

    ``map_grads`` maps channel names (e.g. ``"ortho_sil"``) to per-pixel
    adjoints; missing channels count as zero.
    """
    tape.verify()
    n = len(tape.rays)
    dname, sname = _channel_names(tape.mode)
    for name, g in map_grads.items():
        if name in (dname, sname) and np.shape(g) != (n,):
            raise ShapeMismatch(f"adjoint for {name} has shape {np.shape(g)}, expected ({n},)")
    V = tape.vertices
    grad = np.zeros_like(V)
    valid = tape.rays.valid

    gd = map_grads.get(dname)
    if gd is not None:
        gd = np.where(valid, np.asarray(gd, dtype=np.float64), 0.0)
        pix, f, tri, p, terms, diff, depth = _depth_terms(tape, V)
        if pix.size:
            cA, c0, c1, S, w0, w1, w2 = terms
            g = gd[pix]
            e = diff / np.where(depth > 0, depth, 1.0)[:, None]
            v0, v1, v2 = tri[:, 0], tri[:, 1], tri[:, 2]
            dw0 = _ratio_grads(v0, v1, v2, v1, v2, p, c0, cA, S, w0, (None, 0, 1))
            dw1 = _ratio_grads(v0, v1, v2, v2, v0, p, c1, cA, S, w1, (1, None, 0))
            s0 = (e * (v0 - v2)).sum(axis=1)
            s1 = (e * (v1 - v2)).sum(axis=1)
            ws = (w0, w1, w2)
            corners = tape.faces[f]
            for q in range(3):
                contrib = g[:, None] * (ws[q][:, None] * e + s0[:, None] * dw0[q] + s1[:, None] * dw1[q])
                np.add.at(grad, corners[:, q], contrib)

    gs = map_grads.get(sname)
    if gs is not None:
        gs = np.where(valid, np.asarray(gs, dtype=np.float64), 0.0)
        alpha, geo = _hit_alpha(V, tape.faces, tape.face, tape.kind, tape.point, tape.delta)
        if geo is not None:
            one_minus = 1.0 - alpha
            kk = alpha.shape[1]
            prefix = np.ones_like(alpha)
            suffix = np.ones_like(alpha)
            for j in range(1, kk):
                prefix[:, j] = prefix[:, j - 1] * one_minus[:, j - 1]
                suffix[:, kk - 1 - j] = suffix[:, kk - j] * one_minus[:, kk - j]
            others = prefix * suffix
            idx, tri, p, q, d2, bary, feat, et = geo
            rows = idx[0]
            a_j = alpha[idx]
            # d(sil)/d(v_q) = others * a_j * (2 / delta) * bary_q * (p - q)
            scale = gs[rows] * others[idx] * a_j * (2.0 / tape.delta)
            corners = tape.faces[tape.face[idx]]
            for c in range(3):
                np.add.at(grad, corners[:, c], (scale * bary[:, c])[:, None] * (p - q))
    return grad


def mask_depth_gradient(depth_grads, target_occupancy) -> np.ndarray:
    """Zero depth adjoints wherever the target has no full occupancy."""
    g = np.asarray(depth_grads, dtype=np.float64)
    occ = np.asarray(target_occupancy, dtype=np.float64)
    if g.shape != occ.shape:
        raise ShapeMismatch(f"gradient shape {g.shape} != occupancy shape {occ.shape}")
    return np.where(occ >= 1.0, g, 0.0)


@dataclass(frozen=True)
class ProjectionConfig:
    k: int = DEFAULT_K
    r: float = DEFAULT_RADIUS
    delta: float = DEFAULT_DELTA
    background: float = DEFAULT_BACKGROUND
    channels: tuple = DEFAULT_CHANNELS
    eps_equator: float = DEFAULT_EPS_EQUATOR


def resolve_channels(spec) -> tuple:
    """``"default"``, ``"all"``, a comma list or a sequence of channel names."""
    if spec is None or spec == "default":
        return DEFAULT_CHANNELS
    if spec == "all":
        return CHANNELS
    if isinstance(spec, str):
        spec = [s.strip() for s in spec.split(",") if s.strip()]
    out = tuple(spec)
    unknown = [c for c in out if c not in CHANNELS]
    if unknown or not out:
        raise ValueError(f"unknown channels {unknown}; choose from {CHANNELS}")
    return tuple(c for c in CHANNELS if c in out)


def full_projection(mesh: TriangleMesh, grid: SphereGrid, config: ProjectionConfig = None,
                    return_tapes: bool = False):
    """Radial + orthographic projection producing the requested channels.

    The default channel set is radial depth, orthographic depth and
    orthographic silhouette; pass ``channels="all"`` to add radial silhouette.
    """
    config = config or ProjectionConfig()
    channels = resolve_channels(config.channels)
    bvh = None if mesh.is_empty() else build_bvh(mesh)
    chans, valid, tapes = {}, {}, {}
    for mode in (RADIAL, ORTHOGRAPHIC):
        wanted = [c for c in _channel_names(mode) if c in channels]
        if not wanted:
            continue
        rays = make_rays(grid, mode, config.eps_equator)
        m, tape = project_forward(mesh, rays, config.k, config.r, config.delta, config.background,
                                  grid=grid, bvh=bvh)
        tapes[mode] = tape
        for c in wanted:
            chans[c] = m.channels[c]
            valid[c] = m.valid[c]
    ordered = {c: chans[c] for c in channels}
    smap = SphericalMap(grid, ordered, {c: valid[c] for c in channels}, float(config.background))
    return (smap, tapes) if return_tapes else smap


def full_backward(tapes: dict, map_grads: dict) -> np.ndarray:
    """Sum of :func:`project_backward` over the per-mode tapes."""
    grad = None
    for tape in tapes.values():
        g = project_backward(tape, map_grads)
        grad = g if grad is None else grad + g
    return grad


# ---------------------------------------------------------------------------
# .sphmap files: compact JSON header line, then channel-major little-endian float32


def sphmap_header(smap: SphericalMap) -> dict:
    head = {"schema": "sphmap-v1"}
    head.update(smap.grid.header())
    head["channels"] = list(smap.channels)
    head["background"] = float(smap.background)
    return head


def write_sphmap(path, smap: SphericalMap) -> None:
    header = json.dumps(sphmap_header(smap), separators=(",", ":")) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        for c in smap.channels:
            fh.write(np.asarray(smap.channels[c], dtype="<f4").tobytes())


def read_sphmap(path) -> SphericalMap:
    with open(path, "rb") as fh:
        head = json.loads(fh.readline().decode("utf-8"))
        if head.get("schema") != "sphmap-v1":
            raise ValueError(f"{path}: not a sphmap-v1 file")
        grid = grid_from_header(head)
        data = np.frombuffer(fh.read(), dtype="<f4").astype(np.float64)
    names = head["channels"]
    if data.size != len(names) * grid.n_pixels:
        raise ValueError(f"{path}: payload size does not match header")
    data = data.reshape(len(names), grid.n_pixels)
    chans = {c: data[i] for i, c in enumerate(names)}
    bg = float(head["background"])
    valid = {}
    for c in names:
        if c.startswith("ortho"):
            valid[c] = np.abs(grid.directions[:, 2]) >= DEFAULT_EPS_EQUATOR
        else:
            valid[c] = np.ones(grid.n_pixels, dtype=bool)
    return SphericalMap(grid, chans, valid, bg)
