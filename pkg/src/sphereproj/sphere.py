"""Sphere discretizations and per-pixel rays for spherical projection.

HEALPix pixel centers use RING ordering: rings run from the north pole
(ring 1) to the south pole (ring 4*nside - 1), pixels within a ring by
increasing azimuth. The z axis is the gravity-aligned axis used by the
orthographic projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidNside

RADIAL = "radial"
ORTHOGRAPHIC = "ortho"
DEFAULT_EPS_EQUATOR = 1e-9


@dataclass(frozen=True, eq=False)
class SphereGrid:
    scheme: str  # "healpix" or "equirect"
    params: tuple
    directions: np.ndarray
    ordering: str

    @property
    def n_pixels(self) -> int:
        return len(self.directions)

    @property
    def nside(self):
        return self.params[0] if self.scheme == "healpix" else None

    def header(self) -> dict:
        if self.scheme == "healpix":
            return {"scheme": "healpix", "nside": self.params[0], "ordering": self.ordering}
        return {"scheme": "equirect", "n_theta": self.params[0], "n_phi": self.params[1],
                "ordering": self.ordering}

    def same_as(self, other: "SphereGrid") -> bool:
        return (self is other) or (self.scheme == other.scheme and tuple(self.params) == tuple(other.params))


def _unit(z, phi):
    s = np.sqrt((1.0 - z) * (1.0 + z))
    d = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
    # renormalize to keep |d| within rounding of 1
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def healpix_ring_layout(nside: int):
    """Per-ring ``(z, pixel count, azimuth offset)`` for rings 1 .. 4*nside-1."""
    rings = []
    n = nside
    for i in range(1, 4 * n):
        if i < n:
            rings.append((1.0 - i * i / (3.0 * n * n), 4 * i, 0.5))
        elif i <= 3 * n:
            shift = 0.5 if (i + n) % 2 == 0 else 1.0
            rings.append((4.0 / 3.0 - 2.0 * i / (3.0 * n), 4 * n, shift))
        else:
            ii = 4 * n - i
            rings.append((-(1.0 - ii * ii / (3.0 * n * n)), 4 * ii, 0.5))
    return rings


def healpix_grid(nside: int) -> SphereGrid:
    """HEALPix pixel centers in RING order, ``12 * nside**2`` directions."""
    if not isinstance(nside, (int, np.integer)) or nside < 1 or (nside & (nside - 1)):
        raise InvalidNside(f"nside must be a positive power of two, got {nside!r}")
    zs = []
    phis = []
    for z, count, shift in healpix_ring_layout(int(nside)):
        j = np.arange(1, count + 1)
        phis.append((j - shift) * (2.0 * np.pi / count))
        zs.append(np.full(count, z))
    dirs = _unit(np.concatenate(zs), np.concatenate(phis))
    dirs.setflags(write=False)
    return SphereGrid("healpix", (int(nside),), dirs, "RING")


def equirect_grid(n_theta: int, n_phi: int) -> SphereGrid:
    """Cell centers of a (colatitude, azimuth) raster, row-major by colatitude."""
    if n_theta < 1 or n_phi < 1:
        raise ValueError("equirect grid needs positive dimensions")
    theta = (np.arange(n_theta) + 0.5) * np.pi / n_theta
    phi = (np.arange(n_phi) + 0.5) * 2.0 * np.pi / n_phi
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    dirs = _unit(np.cos(tt).ravel(), pp.ravel())
    dirs.setflags(write=False)
    return SphereGrid("equirect", (int(n_theta), int(n_phi)), dirs, "row-major")


def grid_from_header(header: dict) -> SphereGrid:
    if header["scheme"] == "healpix":
        return healpix_grid(int(header["nside"]))
    if header["scheme"] == "equirect":
        return equirect_grid(int(header["n_theta"]), int(header["n_phi"]))
    raise ValueError(f"unknown sphere scheme {header['scheme']!r}")


@dataclass(frozen=True, eq=False)
class RaySet:
    grid: SphereGrid
    mode: str
    origins: np.ndarray
    directions: np.ndarray
    valid: np.ndarray

    @property
    def rays(self) -> np.ndarray:
        """Six-tuples ``(Ox, Oy, Oz, Dx, Dy, Dz)`` per pixel."""
        return np.concatenate([self.origins, self.directions], axis=1)

    def __len__(self):
        return len(self.origins)


def make_rays(grid: SphereGrid, mode: str = RADIAL, eps_equator: float = DEFAULT_EPS_EQUATOR) -> RaySet:
    """Rays starting on the unit sphere at every pixel center.

    ``radial`` rays point at the origin. ``ortho`` rays run parallel to the
    z axis toward the equatorial plane; pixels with ``|z| < eps_equator`` have
    no defined direction and are marked invalid (zero direction).
    """
    o = np.array(grid.directions, dtype=np.float64)
    if mode == RADIAL:
        d = -o
        valid = np.ones(len(o), dtype=bool)
    elif mode == ORTHOGRAPHIC:
        valid = np.abs(o[:, 2]) >= eps_equator
        d = np.zeros_like(o)
        d[:, 2] = np.where(valid, -np.sign(o[:, 2]), 0.0)
    else:
        raise ValueError(f"unknown projection mode {mode!r}")
    for a in (o, d, valid):
        a.setflags(write=False)
    return RaySet(grid, mode, o, d, valid)
