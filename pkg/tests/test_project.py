from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sphereproj.errors import ConfigMismatch, ShapeMismatch, TapeReplayMismatch
from sphereproj.gradcheck import gradient_check, near_clamp_boundary
from sphereproj.mesh import TriangleMesh, empty_mesh, icosphere
from sphereproj.project import CHANNELS, DEFAULT_CHANNELS, ProjectionConfig, full_backward, \
    full_projection, mask_depth_gradient, project_backward, project_forward, read_sphmap, \
    replay, resolve_channels, write_sphmap
from sphereproj.raycast import DIRECT, NEAR_MISS
from sphereproj.sphere import ORTHOGRAPHIC, RADIAL, RaySet, healpix_grid, make_rays

FLAT = TriangleMesh(np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]), np.array([[0, 1, 2]]))


def custom_rays(origins, directions, mode=RADIAL):
    """A RaySet over a tiny grid whose first rays are replaced by the given ones."""
    grid = healpix_grid(1)
    base = make_rays(grid, mode)
    o = np.array(base.origins)
    d = np.array(base.directions)
    n = len(origins)
    o[:n] = origins
    d[:n] = directions
    # leftover rays point away from everything
    o[n:] = [10.0, 10.0, 10.0]
    d[n:] = [1.0, 0.0, 0.0]
    return RaySet(grid, mode, o, d, np.ones(len(o), dtype=bool))


@pytest.fixture(scope="module")
def ico4():
    return icosphere(4, 0.5)


def test_icosphere_radial_depth(ico4):
    assert ico4.n_vertices == 2562
    grid = healpix_grid(16)
    smap, _ = project_forward(ico4, make_rays(grid, RADIAL))
    tri = ico4.triangles()
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    sagitta = 0.5 - np.abs((n * tri[:, 0]).sum(1)).min()
    d = smap["radial_depth"]
    assert np.all(d >= 0.5 - 1e-12) and np.all(d <= 0.5 + sagitta + 1e-12)
    assert np.all(smap["radial_sil"] == 1.0)


def test_empty_upper_hemisphere_ortho(hp8):
    mesh = icosphere(2, 0.1, center=(5.0, 5.0, 0.0))
    smap, _ = project_forward(mesh, make_rays(hp8, ORTHOGRAPHIC))
    up = hp8.directions[:, 2] > 0
    assert np.all(smap["ortho_depth"][up] == 2.0)
    assert np.all(smap["ortho_sil"][up] == 0.0)


def test_empty_mesh_is_background(hp8):
    smap = full_projection(empty_mesh(), hp8, ProjectionConfig(channels="all"))
    assert np.all(smap["radial_depth"] == 2.0) and np.all(smap["ortho_sil"] == 0.0)


def test_grazing_ray_alpha():
    delta = 1e-4
    rays = custom_rays([[0.25, -np.sqrt(delta), 1.0]], [[0.0, 0.0, -1.0]])
    smap, tape = project_forward(FLAT, rays, k=8, r=0.02, delta=delta)
    assert tape.kind[0, 0] == NEAR_MISS
    assert smap["radial_sil"][0] == pytest.approx(np.exp(-1.0), abs=1e-12)
    assert smap["radial_depth"][0] == 2.0


def _unit_depth_vjp(mesh, origin, d):
    rays = custom_rays([origin], [d])
    _, tape = project_forward(mesh, rays)
    assert tape.kind[0, 0] == DIRECT
    adj = np.zeros(len(rays))
    adj[0] = 1.0
    return project_backward(tape, {"radial_depth": adj})


def test_translation_along_ray_depth_gradient():
    d = np.array([0.0, 0.0, -1.0])
    g = _unit_depth_vjp(FLAT, [0.2, 0.3, 1.0], d)
    assert float((g @ d).sum()) == pytest.approx(1.0, abs=1e-12)


def test_translation_tilted_face_uses_frozen_point(tilted_triangle):
    # with the hit point frozen, the interpolated point follows the plane
    # only along its normal, so the rate is (n . d)^2
    d = np.array([0.0, 0.0, -1.0])
    g = _unit_depth_vjp(tilted_triangle, [0.0, 0.0, 1.0], d)
    n = tilted_triangle.face_normals()[0]
    assert float((g @ d).sum()) == pytest.approx(float(n @ d) ** 2, abs=1e-12)


def test_zero_adjoint_gives_zero(ico_small, hp8):
    _, tape = project_forward(ico_small, make_rays(hp8, RADIAL))
    z = np.zeros(hp8.n_pixels)
    g = project_backward(tape, {"radial_depth": z, "radial_sil": z})
    assert np.all(g == 0.0)


def test_backward_linear(torus_small, hp8, rng):
    _, tape = project_forward(torus_small, make_rays(hp8, ORTHOGRAPHIC))
    n = hp8.n_pixels
    a = {"ortho_depth": rng.normal(size=n), "ortho_sil": rng.normal(size=n)}
    b = {"ortho_depth": rng.normal(size=n), "ortho_sil": rng.normal(size=n)}
    mix = {c: 2.0 * a[c] - 3.0 * b[c] for c in a}
    lhs = project_backward(tape, mix)
    rhs = 2.0 * project_backward(tape, a) - 3.0 * project_backward(tape, b)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * np.abs(rhs).max())


def test_radial_sil_zero_gradient_at_direct_pixels(torus_small, hp16):
    _, tape = project_forward(torus_small, make_rays(hp16, RADIAL))
    direct = (tape.kind == DIRECT).any(axis=1)
    adj = np.where(direct, 1.0, 0.0)
    g = project_backward(tape, {"radial_sil": adj})
    assert np.all(g == 0.0)


def test_replay_is_bit_exact(torus_small, hp8):
    for mode in (RADIAL, ORTHOGRAPHIC):
        smap, tape = project_forward(torus_small, make_rays(hp8, mode))
        again = replay(tape, np.array(tape.vertices))
        for c in smap.channels:
            assert np.array_equal(smap[c], again[c])


def test_weights_reconstruct_hit(ico_small, hp16):
    _, tape = project_forward(ico_small, make_rays(hp16, RADIAL))
    slot = tape.depth_slot
    pix = np.nonzero(slot >= 0)[0]
    p = tape.point[pix, slot[pix]]
    depth = replay(tape)["radial_depth"][pix]
    recon = np.linalg.norm(p - tape.rays.origins[pix], axis=1)
    assert np.abs(depth - recon).max() < 1e-7


def test_tape_tamper_detected(ico_small, hp8):
    _, tape = project_forward(ico_small, make_rays(hp8, RADIAL))
    bad = np.array(tape.point)
    bad[0, 0, 0] += 1e-3
    object.__setattr__(tape, "point", bad)
    with pytest.raises(TapeReplayMismatch):
        project_backward(tape, {"radial_depth": np.ones(hp8.n_pixels)})


def test_adjoint_shape_checked(ico_small, hp8):
    _, tape = project_forward(ico_small, make_rays(hp8, RADIAL))
    with pytest.raises(ShapeMismatch):
        project_backward(tape, {"radial_depth": np.ones(5)})


def test_grid_mismatch(ico_small, hp8, hp16):
    with pytest.raises(ConfigMismatch):
        project_forward(ico_small, make_rays(hp8, RADIAL), grid=hp16)


@given(st.floats(1e-5, 1e-3), st.floats(1.0, 10.0))
def test_delta_monotone(delta, factor):
    rays = make_rays(healpix_grid(4), ORTHOGRAPHIC)
    mesh = icosphere(1, 0.4)
    a, _ = project_forward(mesh, rays, r=0.1, delta=delta)
    b, _ = project_forward(mesh, rays, r=0.1, delta=delta * factor)
    assert np.all(b["ortho_sil"] >= a["ortho_sil"])


def test_occupancy_bounds(torus_small, hp16):
    smap, tape = project_forward(torus_small, make_rays(hp16, RADIAL), r=0.05)
    sil = smap["radial_sil"]
    assert np.all((sil >= 0) & (sil <= 1))
    assert np.all(sil >= tape.alpha.max(axis=1) - 1e-15)
    assert np.all(smap["radial_depth"] <= 2.0) and np.all(smap["radial_depth"] >= 0)


def test_invalid_equator_pixels():
    grid = healpix_grid(2)
    rays = make_rays(grid, ORTHOGRAPHIC, eps_equator=0.2)
    assert not rays.valid.all()
    smap, tape = project_forward(icosphere(2, 0.9), rays)
    bad = ~rays.valid
    assert np.all(smap["ortho_depth"][bad] == 2.0) and np.all(smap["ortho_sil"][bad] == 0.0)
    g = project_backward(tape, {"ortho_depth": np.where(bad, 1.0, 0.0), "ortho_sil": np.where(bad, 1.0, 0.0)})
    assert np.all(g == 0.0)


def test_mask_examples(rng):
    g = rng.normal(size=20)
    assert np.array_equal(mask_depth_gradient(g, np.ones(20)), g)
    assert np.all(mask_depth_gradient(g, np.zeros(20)) == 0.0)
    occ = np.array([1.0, 0.999, 1.0])
    np.testing.assert_array_equal(mask_depth_gradient([1.0, 2.0, 3.0], occ), [1.0, 0.0, 3.0])
    with pytest.raises(ShapeMismatch):
        mask_depth_gradient(g, np.ones(3))


def test_channel_selection(ico_small, hp8):
    smap = full_projection(ico_small, hp8)
    assert tuple(smap.channels) == DEFAULT_CHANNELS and "radial_sil" not in smap.channels
    assert tuple(full_projection(ico_small, hp8, ProjectionConfig(channels="all")).channels) == CHANNELS
    assert resolve_channels("ortho_sil, radial_depth") == ("radial_depth", "ortho_sil")
    with pytest.raises(ValueError):
        resolve_channels("bogus")


def test_full_projection_deterministic(torus_small, hp16):
    a = full_projection(torus_small, hp16)
    b = full_projection(torus_small, hp16)
    for c in a.channels:
        assert np.array_equal(a[c], b[c])


def test_full_backward_sums_modes(torus_small, hp8, rng):
    smap, tapes = full_projection(torus_small, hp8, ProjectionConfig(channels="all"), return_tapes=True)
    adj = {c: rng.normal(size=hp8.n_pixels) for c in CHANNELS}
    expect = project_backward(tapes[RADIAL], adj) + project_backward(tapes[ORTHOGRAPHIC], adj)
    np.testing.assert_array_equal(full_backward(tapes, adj), expect)


def test_sphmap_round_trip(tmp_path, torus_small, hp8):
    smap = full_projection(torus_small, hp8)
    path = tmp_path / "m.sphmap"
    write_sphmap(path, smap)
    head = path.read_bytes().split(b"\n", 1)[0]
    assert head == (b'{"schema":"sphmap-v1","scheme":"healpix","nside":8,"ordering":"RING",'
                    b'"channels":["radial_depth","ortho_depth","ortho_sil"],"background":2.0}')
    back = read_sphmap(path)
    assert back.grid.same_as(hp8)
    for c in smap.channels:
        np.testing.assert_array_equal(back[c], smap[c].astype(np.float32))


@pytest.mark.parametrize("name", ["triangle", "icosphere", "torus"])
def test_gradient_matches_finite_differences(name, tilted_triangle, ico_small, torus_small, hp8):
    mesh = {"triangle": tilted_triangle, "icosphere": ico_small, "torus": torus_small}[name]
    rep = gradient_check(mesh, hp8, samples=10, seed=3)
    for c, err in rep.max_rel_err.items():
        assert err < (1e-4 if c.endswith("depth") else 1e-3), (c, err)


def test_clamp_exclusion_flags_corner_rays():
    # first ray's foot point projects exactly onto the end of edge v0 -> v1
    rays = custom_rays([[1.0, -0.005, 1.0], [0.5, -0.005, 1.0], [0.25, 0.25, 1.0]], [[0.0, 0.0, -1.0]] * 3)
    _, tape = project_forward(FLAT, rays)
    assert tape.kind[0, 0] == NEAR_MISS and tape.kind[1, 0] == NEAR_MISS
    flags = near_clamp_boundary(tape)
    assert flags[0] and not flags[1] and not flags[2]
