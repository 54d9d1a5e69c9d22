from __future__ import annotations

import json

import numpy as np
import pytest

from sphereproj.cli import main
from sphereproj.grid import SdfGrid, read_grid, sphere_sdf, write_grid
from sphereproj.mcubes import marching_cubes
from sphereproj.mesh import TriangleMesh, icosphere, read_obj, torus_mesh, write_obj
from sphereproj.metrics import write_xyz
from sphereproj.project import ProjectionConfig, full_projection, read_sphmap
from sphereproj.sdfdata import read_samples
from sphereproj.sphere import healpix_grid


@pytest.fixture(scope="module")
def files(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    write_obj(d / "ico.obj", icosphere(3, 0.5))
    write_obj(d / "torus.obj", torus_mesh(0.5, 0.2, 48, 24))
    write_grid(d / "sphere24.sdfgrid", SdfGrid.from_function(sphere_sdf(0.45), 24))
    write_grid(d / "sphere32.sdfgrid", SdfGrid.from_function(sphere_sdf(0.5), 32))
    return d


def resolved_config(capsys):
    err = capsys.readouterr().err.splitlines()
    return json.loads(err[0])


def test_project_default(files, tmp_path, capsys):
    out = tmp_path / "ico.sphmap"
    assert main(["project", str(files / "ico.obj"), str(out), "--nside", "32"]) == 0
    m = read_sphmap(out)
    assert m.grid.n_pixels == 12288
    assert list(m.channels) == ["radial_depth", "ortho_depth", "ortho_sil"]
    cfg = resolved_config(capsys)
    assert cfg["command"] == "project" and cfg["nside"] == 32


def test_project_all_channels(files, tmp_path):
    out = tmp_path / "all.sphmap"
    assert main(["project", str(files / "ico.obj"), str(out), "--nside", "4", "--channels", "all"]) == 0
    head = json.loads(out.read_bytes().split(b"\n", 1)[0])
    assert len(head["channels"]) == 4


def test_project_missing_input(tmp_path):
    out = tmp_path / "x.sphmap"
    assert main(["project", str(tmp_path / "nope.obj"), str(out)]) == 2
    assert not out.exists()


@pytest.mark.parametrize("argv", [
    ["project", "a.obj", "b.sphmap", "--nside", "3"],
    ["project", "a.obj", "b.sphmap", "--channels", "bogus"],
    ["project", "a.obj", "b.sphmap", "--bogus-flag"],
    ["gradcheck", "a.obj", "--tol", "-1"],
])
def test_config_errors(argv, files, tmp_path):
    argv = [str(files / "ico.obj") if a == "a.obj" else str(tmp_path / a) if a == "b.sphmap" else a
            for a in argv]
    with pytest.raises(SystemExit) as exc:
        code = main(argv)
        raise SystemExit(code)
    assert exc.value.code == 3


def test_mcubes_sphere_and_empty(files, tmp_path, capsys):
    out = tmp_path / "s.obj"
    assert main(["mcubes", str(files / "sphere32.sdfgrid"), str(out)]) == 0
    mesh = read_obj(out)
    assert mesh.is_watertight() and mesh.euler_characteristic() == 2
    write_grid(tmp_path / "pos.sdfgrid", SdfGrid(np.ones((6, 6, 6))))
    capsys.readouterr()
    assert main(["mcubes", str(tmp_path / "pos.sdfgrid"), str(tmp_path / "e.obj")]) == 0
    assert "warning" in capsys.readouterr().err
    assert read_obj(tmp_path / "e.obj").n_faces == 0


def test_mcubes_iso_shrinks(files, tmp_path):
    main(["mcubes", str(files / "sphere32.sdfgrid"), str(tmp_path / "a.obj")])
    main(["mcubes", str(files / "sphere32.sdfgrid"), str(tmp_path / "b.obj"), "--iso", "-0.1"])
    ra = np.linalg.norm(read_obj(tmp_path / "a.obj").vertices, axis=1).mean()
    rb = np.linalg.norm(read_obj(tmp_path / "b.obj").vertices, axis=1).mean()
    assert rb == pytest.approx(ra - 0.1, abs=0.01)


def test_mcubes_then_project_bit_exact(files, tmp_path):
    obj = tmp_path / "mc.obj"
    out = tmp_path / "mc.sphmap"
    assert main(["mcubes", str(files / "sphere32.sdfgrid"), str(obj)]) == 0
    assert main(["project", str(obj), str(out), "--nside", "8"]) == 0
    mesh = marching_cubes(read_grid(files / "sphere32.sdfgrid"))
    ref = full_projection(mesh, healpix_grid(8), ProjectionConfig())
    got = read_sphmap(out)
    for c in ref.channels:
        assert np.array_equal(got[c], ref[c].astype(np.float32))


def test_optimize_trace(files, tmp_path):
    args = [str(files / "sphere24.sdfgrid"), str(files / "torus.obj")]
    flags = ["--iters", "2", "--nside", "8", "--npoints", "128", "--step", "3e5", "--seed", "4"]
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["optimize", *args, str(a), *flags, "--out-grid", str(tmp_path / "g.sdfgrid")]) == 0
    assert main(["optimize", *args, str(b), *flags]) == 0
    lines = a.read_text().splitlines()
    assert lines[0] == "iter,loss,cd,emd,euler,nverts,nfaces" and len(lines) == 4
    assert a.read_bytes() == b.read_bytes()
    assert read_grid(tmp_path / "g.sdfgrid").resolution == 24
    c = tmp_path / "c.csv"
    assert main(["optimize", *args, str(c), *flags, "--features", "radial_sil"]) == 0
    assert c.read_text() != a.read_text()


def test_ablation_cli(files, tmp_path):
    out = tmp_path / "abl.csv"
    argv = ["ablation", str(files / "sphere24.sdfgrid"), str(files / "torus.obj"), str(out),
            "--sets", "combined,ortho_sil", "--checkpoints", "1,2", "--nside", "8", "--npoints", "64",
            "--step", "3e5"]
    assert main(argv) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "features,iter,cd,emd" and len(lines) == 5
    assert main(argv[:-6] + ["--sets", "nonsense"]) == 3


def test_metrics_cli(files, tmp_path, capsys):
    a = tmp_path / "a"
    a.mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        write_xyz(a / f"s{i}.xyz", rng.uniform(-0.5, 0.5, (64, 3)))
    capsys.readouterr()
    assert main(["metrics", str(a), str(a), "--npoints", "64"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert (rep["mmd_cd"], rep["mmd_emd"], rep["cov_cd"], rep["cov_emd"], rep["jsd"]) == (0.0, 0.0, 1.0, 1.0, 0.0)
    b = tmp_path / "b"
    b.mkdir()
    write_xyz(b / "t.xyz", rng.uniform(-0.5, 0.5, (50, 3)))
    assert main(["metrics", str(a), str(b), "--metric", "emd"]) == 3
    assert main(["metrics", str(a), str(tmp_path / "missing")]) == 2


def test_metrics_default_npoints(files, tmp_path, capsys):
    d = tmp_path / "m"
    d.mkdir()
    write_obj(d / "ico.obj", icosphere(2, 0.5))
    capsys.readouterr()
    assert main(["metrics", str(d), str(d), "--metric", "cd"]) == 0
    cap = capsys.readouterr()
    assert json.loads(cap.err.splitlines()[0])["npoints"] == 2048
    assert json.loads(cap.out)["mmd_cd"] == 0.0


def test_gradcheck_cli(files, tmp_path, capsys):
    assert main(["gradcheck", str(files / "ico.obj"), "--samples", "5", "--nside", "4"]) == 0
    assert main(["gradcheck", str(files / "ico.obj"), "--samples", "3", "--nside", "4", "--tol", "1e-12"]) == 1
    out = capsys.readouterr().out
    assert "gradcheck FAIL" in out and "max_rel_err=" in out


def test_gradcheck_degenerate_face(tmp_path, capsys):
    ico = icosphere(2, 0.5)
    # three collinear points: a zero-area face
    v = np.concatenate([ico.vertices, [[0.0, 0.0, 0.9], [0.1, 0.0, 0.9], [0.2, 0.0, 0.9]]])
    n = ico.n_vertices
    f = np.concatenate([ico.faces, [[n, n + 1, n + 2]]])
    write_obj(tmp_path / "deg.obj", TriangleMesh(v, f))
    capsys.readouterr()
    main(["gradcheck", str(tmp_path / "deg.obj"), "--samples", "2", "--nside", "4"])
    report = json.loads(capsys.readouterr().out.splitlines()[0])
    assert report["skipped_faces"] > 0


def test_sdfsample_cli(files, tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    base = ["sdfsample", str(files / "ico.obj")]
    flags = ["--nnear", "400", "--nuniform", "100", "--seed", "2"]
    assert main([*base, str(a), *flags]) == 0
    assert main([*base, str(b), *flags, "--offset", "0"]) == 0
    sa, sb = read_samples(a), read_samples(b)
    assert len(sa) == 500
    np.testing.assert_allclose(sa.signed_distances - sb.signed_distances, -0.002, atol=1e-7)


def test_sdfsample_rejects_open_plane(tmp_path):
    plane = TriangleMesh(np.array([[-0.5, -0.5, 0], [0.5, -0.5, 0], [0.5, 0.5, 0], [-0.5, 0.5, 0]], float),
                         np.array([[0, 1, 2], [0, 2, 3]]))
    write_obj(tmp_path / "plane.obj", plane)
    out = tmp_path / "p.bin"
    assert main(["sdfsample", str(tmp_path / "plane.obj"), str(out), "--nnear", "200", "--nuniform", "20"]) == 4
    assert not out.exists()


def test_synth(tmp_path):
    assert main(["synth", "torus", str(tmp_path / "t.obj")]) == 0
    assert read_obj(tmp_path / "t.obj").euler_characteristic() == 0
    assert main(["synth", "sphere", str(tmp_path / "s.sdfgrid"), "--resolution", "16"]) == 0
    assert read_grid(tmp_path / "s.sdfgrid").resolution == 16
