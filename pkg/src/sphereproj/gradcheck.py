"""Finite-difference verification of the projection backward pass.

The reference is a central difference of the tape replay, so recorded hit
points stay fixed and the comparison is exact up to truncation and
rounding. Near-miss terms whose closest point sits within ``clamp_tol`` of
a clamp switch are excluded from the silhouette check.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import TriangleMesh
from .project import CHANNELS, ProjectionConfig, full_projection, project_backward, replay
from .raycast import MIN_AREA, NEAR_MISS, nearest_on_triangle_batch
from .sphere import SphereGrid

CLAMP_TOL = 1e-6


@dataclass
class GradcheckReport:
    samples: int
    tol: float
    max_rel_err: dict = field(default_factory=dict)
    skipped_faces: int = 0
    excluded_pixels: dict = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_err.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst <= self.tol

    def as_dict(self) -> dict:
        return {"passed": bool(self.passed), "samples": self.samples, "tol": self.tol,
                "max_rel_err": {k: float(v) for k, v in self.max_rel_err.items()}, "worst": float(self.worst),
                "skipped_faces": self.skipped_faces, "excluded_pixels": self.excluded_pixels}


def near_clamp_boundary(tape, tol: float = CLAMP_TOL) -> np.ndarray:
    """Pixels with a near-miss term close to a switch of the clamped projection."""
    near = (tape.kind == NEAR_MISS) & (tape.face >= 0)
    idx = np.nonzero(near)
    out = np.zeros(len(tape.rays), dtype=bool)
    if idx[0].size == 0:
        return out
    tri = tape.vertices[tape.faces[tape.face[idx]]]
    p = tape.point[idx]
    _, _, feat, bary, _ = nearest_on_triangle_batch(p, tri)
    # unclamped edge parameter of the winning edge
    e = np.maximum(feat - 1, 0)
    rows = np.arange(len(p))
    s = tri[rows, e]
    ev = tri[rows, (e + 1) % 3] - s
    raw = ((p - s) * ev).sum(axis=1) / (ev * ev).sum(axis=1)
    # interior closest points near an edge, edge parameters near a clamp limit
    risky = np.where(feat == 0, bary.min(axis=1) < tol, (np.abs(raw) < tol) | (np.abs(raw - 1.0) < tol))
    out[idx[0][risky]] = True
    return out


def _rel_err(a, b):
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0.0 else abs(a - b) / scale


def gradient_check(mesh: TriangleMesh, grid: SphereGrid, samples: int = 100, tol: float = 1e-4,
                   eps: float = 1e-6, seed=0, config: ProjectionConfig = None,
                   channels=CHANNELS) -> GradcheckReport:
    """Compare VJPs with central differences for ``samples`` random
    (adjoint, perturbation) pairs per channel."""
    config = config or ProjectionConfig(channels="all")
    rng = np.random.default_rng(seed)
    _, tapes = full_projection(mesh, grid, ProjectionConfig(config.k, config.r, config.delta,
                                                            config.background, CHANNELS,
                                                            config.eps_equator), return_tapes=True)
    report = GradcheckReport(samples, tol, skipped_faces=int(np.sum(mesh.face_areas() < MIN_AREA)))
    V = np.array(mesh.vertices)
    for tape in tapes.values():
        clamp = near_clamp_boundary(tape)
        for ch in (f"{tape.mode}_depth", f"{tape.mode}_sil"):
            if ch not in channels:
                continue
            keep = tape.rays.valid.copy()
            if ch.endswith("_sil"):
                keep &= ~clamp
                report.excluded_pixels[ch] = int(np.count_nonzero(clamp))
            worst = 0.0
            for _ in range(samples):
                adj = np.where(keep, rng.normal(size=len(keep)), 0.0)
                direction = rng.normal(size=V.shape)
                grad = project_backward(tape, {ch: adj})
                analytic = float(np.sum(grad * direction))
                fp = replay(tape, V + eps * direction)[ch] @ adj
                fm = replay(tape, V - eps * direction)[ch] @ adj
                worst = max(worst, _rel_err(analytic, (fp - fm) / (2.0 * eps)))
            report.max_rel_err[ch] = worst
    return report
