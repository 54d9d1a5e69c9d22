"""Shape optimization through the spherical projection.

Grid values are updated by gradient descent on the pixel-wise MSE between
the spherical maps of the extracted surface and those of a target mesh.
Vertex gradients reach the grid through the isosurface routing rule.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import SurfaceVanished
from .grid import DEFAULT_OMEGA, SdfGrid, route_surface_gradient, sphere_sdf
from .losses import spherical_mse
from .mcubes import marching_cubes
from .mesh import TriangleMesh, torus_mesh
from .metrics import DEFAULT_NPOINTS, chamfer, emd, sample_surface
from .project import CHANNELS, DEFAULT_CHANNELS, ProjectionConfig, SphericalMap, full_backward, \
    full_projection, mask_depth_gradient
from .raycast import DEFAULT_K, DEFAULT_RADIUS
from .sphere import SphereGrid, healpix_grid

TRACE_HEADER = ["iter", "loss", "cd", "emd", "euler", "nverts", "nfaces"]
ABLATION_HEADER = ["features", "iter", "cd", "emd"]
ABLATION_FEATURES = {
    "radial_depth": ("radial_depth",),
    "ortho_depth": ("ortho_depth",),
    "radial_sil": ("radial_sil",),
    "ortho_sil": ("ortho_sil",),
    "combined": DEFAULT_CHANNELS,
}
MAX_HALVINGS = 20
# marching-cubes triangles are small next to r, so near misses crowd out
# the first direct hit at the projection default k
OPTIM_K = 32
# field gradients peak near 1e-7 after the omega scaling and the 1/N of the
# pixel MSE, so the step has to be large for the surface to move a voxel
DEFAULT_STEP = 1e6


@dataclass(frozen=True)
class OptimConfig:
    features: tuple = DEFAULT_CHANNELS
    iterations: int = 200
    step_size: float = DEFAULT_STEP
    grid_resolution: int = 64
    k: int = OPTIM_K
    r: float = DEFAULT_RADIUS
    delta: float = 1e-4
    omega: float = DEFAULT_OMEGA
    seed: int = 0
    nside: int = 32
    halving: bool = False
    metric_points: int = DEFAULT_NPOINTS

    def __post_init__(self):
        feats = tuple(self.features)
        if not feats or any(f not in CHANNELS for f in feats):
            raise ValueError(f"features must be a non-empty subset of {CHANNELS}")
        object.__setattr__(self, "features", tuple(c for c in CHANNELS if c in feats))
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        # zero is allowed so a frozen run can be traced
        if not (self.step_size >= 0 and np.isfinite(self.step_size)):
            raise ValueError("step_size must be a finite non-negative number")

    def projection(self, channels) -> ProjectionConfig:
        return ProjectionConfig(k=self.k, r=self.r, delta=self.delta, channels=tuple(channels))


@dataclass
class OptimTrace:
    loss: list = field(default_factory=list)
    cd: list = field(default_factory=list)
    emd: list = field(default_factory=list)
    euler: list = field(default_factory=list)
    nverts: list = field(default_factory=list)
    nfaces: list = field(default_factory=list)

    def __len__(self):
        return len(self.loss)

    def append(self, loss, cd, emd_, euler, nverts, nfaces):
        self.loss.append(float(loss))
        self.cd.append(float(cd))
        self.emd.append(float(emd_))
        self.euler.append(int(euler))
        self.nverts.append(int(nverts))
        self.nfaces.append(int(nfaces))

    def rows(self):
        for i in range(len(self)):
            yield [i, self.loss[i], self.cd[i], self.emd[i], self.euler[i], self.nverts[i], self.nfaces[i]]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_HEADER)
        for row in self.rows():
            w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3]), *row[4:]])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


@dataclass
class OptimTask:
    """Initial grid, target mesh and sphere discretization of one experiment."""

    init_grid: SdfGrid
    target_mesh: TriangleMesh
    sphere: SphereGrid
    config: OptimConfig = OptimConfig()


def sphere_to_torus_task(config: OptimConfig = OptimConfig()) -> OptimTask:
    """Sphere of radius 0.45 as the start, torus (0.5, 0.2) as the target."""
    init = SdfGrid.from_function(sphere_sdf(0.45), config.grid_resolution)
    return OptimTask(init, torus_mesh(0.5, 0.2, 96, 48), healpix_grid(config.nside), config)


class _Evaluator:
    """Everything that is fixed over one run: target maps and target samples."""

    def __init__(self, target_mesh, sphere, config):
        self.sphere = sphere
        self.config = config
        every = full_projection(target_mesh, sphere, config.projection(CHANNELS))
        self.target = SphericalMap(sphere, {c: every.channels[c] for c in config.features},
                                   {c: every.valid[c] for c in config.features}, every.background)
        self.occupancy = {"radial_depth": every.channels["radial_sil"],
                          "ortho_depth": every.channels["ortho_sil"]}
        self.target_points = sample_surface(target_mesh, config.metric_points, seed=config.seed)

    def state(self, values):
        grid = SdfGrid(values)
        mesh = marching_cubes(grid)
        if mesh.is_empty():
            return None
        smap, tapes = full_projection(mesh, self.sphere, self.config.projection(self.config.features),
                                      return_tapes=True)
        loss, adj = spherical_mse(smap, self.target)
        return {"grid": grid, "mesh": mesh, "loss": loss, "adj": adj, "tapes": tapes}

    def field_gradient(self, st):
        adj = dict(st["adj"])
        for c in ("radial_depth", "ortho_depth"):
            if c in adj:
                adj[c] = mask_depth_gradient(adj[c], self.occupancy[c])
        vgrad = full_backward(st["tapes"], adj)
        return route_surface_gradient(st["mesh"], st["grid"], vgrad, self.config.omega)

    def metrics(self, mesh):
        pts = sample_surface(mesh, self.config.metric_points, seed=self.config.seed)
        return chamfer(pts, self.target_points), emd(pts, self.target_points)

    def record(self, trace, st):
        cd, e = self.metrics(st["mesh"])
        m = st["mesh"]
        trace.append(st["loss"], cd, e, m.euler_characteristic(), m.n_vertices, m.n_faces)


def run_optimization(init_grid: SdfGrid, target_mesh: TriangleMesh, sphere: SphereGrid,
                     config: OptimConfig = OptimConfig(), callback=None):
    """Gradient descent on grid values; returns ``(final grid, trace)``.

    In halving mode a step that raises the loss is undone and retried with
    half the step size, so the recorded loss never increases. Raises
    :class:`SurfaceVanished` (carrying the partial trace) when the surface
    disappears.
    """
    ev = _Evaluator(target_mesh, sphere, config)
    trace = OptimTrace()
    st = ev.state(np.array(init_grid.values))
    if st is None:
        raise SurfaceVanished("initial grid has no isosurface", trace, init_grid)
    ev.record(trace, st)
    step = config.step_size
    for it in range(1, config.iterations + 1):
        g = ev.field_gradient(st)
        tries = 0
        while True:
            cand = ev.state(st["grid"].values - step * g)
            if not config.halving:
                if cand is None:
                    raise SurfaceVanished(f"surface vanished at iteration {it}", trace, st["grid"])
                break
            if cand is not None and cand["loss"] <= st["loss"]:
                break
            tries += 1
            step *= 0.5
            if tries > MAX_HALVINGS:
                cand = st
                break
        st = cand
        ev.record(trace, st)
        if callback is not None:
            callback(it, st, trace)
    return st["grid"], trace


@dataclass
class AblationTable:
    checkpoints: tuple
    rows: list  # (label, [(cd, emd) per checkpoint])

    def wide(self):
        return [[label] + [x for pair in cells for x in pair] for label, cells in self.rows]

    def value(self, label, checkpoint, metric="cd"):
        j = self.checkpoints.index(checkpoint)
        for lab, cells in self.rows:
            if lab == label:
                return cells[j][0 if metric == "cd" else 1]
        raise KeyError(label)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        for label, cells in self.rows:
            for cp, (cd, e) in zip(self.checkpoints, cells):
                w.writerow([label, cp, repr(cd), repr(e)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())


def feature_label(features) -> str:
    feats = tuple(c for c in CHANNELS if c in features)
    for name, fs in ABLATION_FEATURES.items():
        if fs == feats:
            return name
    return "+".join(feats)


def ablation_table(task: OptimTask, feature_sets=None, checkpoints=(5, 10, 30)) -> AblationTable:
    """CD/EMD at each checkpoint for one run per feature set (same seed and config)."""
    if feature_sets is None:
        feature_sets = list(ABLATION_FEATURES.values())
    checkpoints = tuple(sorted(checkpoints))
    rows = []
    for feats in feature_sets:
        if isinstance(feats, str):
            feats = ABLATION_FEATURES.get(feats, (feats,))
        cfg = replace(task.config, features=tuple(feats), iterations=max(checkpoints))
        try:
            _, trace = run_optimization(task.init_grid, task.target_mesh, task.sphere, cfg)
        except SurfaceVanished as exc:
            trace = exc.trace
        cells = []
        for cp in checkpoints:
            i = min(cp, len(trace) - 1)
            cells.append((trace.cd[i], trace.emd[i]))
        rows.append((feature_label(feats), cells))
    return AblationTable(checkpoints, rows)
