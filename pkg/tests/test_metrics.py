from __future__ import annotations

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from sphereproj.errors import EmptyMesh, EmptySet, SizeMismatch
from sphereproj.mesh import TriangleMesh, empty_mesh, icosphere
from sphereproj.metrics import chamfer, emd, jsd, jsd_histograms, mmd_cov, mmd_cov_from_matrix, \
    occupancy_histogram, pairwise, read_xyz, sample_surface, set_metrics, write_xyz

LN2 = math.log(2.0)
cloud = arrays(np.float64, (5, 3), elements=st.floats(-1, 1))


def brute_chamfer(a, b):
    d = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
    ab = np.mean([min(d[i, j] for j in range(len(b))) for i in range(len(a))])
    ba = np.mean([min(d[i, j] for i in range(len(a))) for j in range(len(b))])
    return ab + ba


def brute_emd(a, b):
    n = len(a)
    best = np.inf
    for perm in itertools.permutations(range(n)):
        best = min(best, sum(np.linalg.norm(a[i] - b[perm[i]]) for i in range(n)))
    return best / n


def brute_mmd_cov(gen, test, dist):
    D = [[dist(g, t) for t in test] for g in gen]
    mmd = np.mean([min(D[g][t] for g in range(len(gen))) for t in range(len(test))])
    covered = set()
    for g in range(len(gen)):
        best, arg = np.inf, -1
        for t in range(len(test)):
            if D[g][t] < best:
                best, arg = D[g][t], t
        covered.add(arg)
    return mmd, len(covered) / len(test)


# sample_surface

def test_sample_single_triangle_inside():
    v = np.array([[0.0, 0, 0], [np.sqrt(2.0), 0, 0], [0, np.sqrt(2.0), 0]])
    tri = TriangleMesh(v, np.array([[0, 1, 2]]))
    assert tri.face_areas()[0] == pytest.approx(1.0)
    p = sample_surface(tri, 3, seed=7)
    assert p.shape == (3, 3)
    s = np.sqrt(2.0)
    assert np.all(p[:, 0] >= 0) and np.all(p[:, 1] >= 0) and np.all(p[:, 0] + p[:, 1] <= s + 1e-12)
    assert np.all(p[:, 2] == 0)


def test_sample_icosphere_mean_norm(ico_small):
    p = sample_surface(icosphere(4, 0.5), 10000, seed=0)
    m = np.linalg.norm(p, axis=1).mean()
    assert 0.497 <= m <= 0.5


def test_sample_area_proportional():
    v = np.array([[0, 0, 0], [3, 0, 0], [0, 3, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]], dtype=float)
    m = TriangleMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))
    p = sample_surface(m, 100000, seed=1)
    frac = np.mean(p[:, 0] < 4.0)
    assert abs(frac - 0.9) < 0.01


def test_sample_deterministic_and_empty(torus_small):
    assert np.array_equal(sample_surface(torus_small, 100, 3), sample_surface(torus_small, 100, 3))
    with pytest.raises(EmptyMesh):
        sample_surface(empty_mesh(), 10)


# chamfer

def test_chamfer_examples(rng):
    a = rng.normal(size=(20, 3))
    assert chamfer(a, a) == 0.0
    assert chamfer([[0.0, 0, 0]], [[1.0, 0, 0]]) == 2.0


def test_chamfer_brute_force(rng):
    a = rng.normal(size=(50, 3))
    b = rng.normal(size=(50, 3))
    assert chamfer(a, b) == pytest.approx(brute_chamfer(a, b), rel=1e-12)
    c = rng.normal(size=(37, 3))
    assert chamfer(a, c) == pytest.approx(brute_chamfer(a, c), rel=1e-12)


@given(cloud, cloud)
def test_chamfer_symmetric(a, b):
    assert chamfer(a, b) == pytest.approx(chamfer(b, a), rel=1e-12, abs=1e-15)


# emd

def test_emd_examples(rng):
    a = rng.normal(size=(30, 3))
    assert emd(a, a) == 0.0
    x = [[0.0, 0, 0], [1.0, 0, 0]]
    y = [[0.1, 0, 0], [0.9, 0, 0]]
    assert emd(x, y) == pytest.approx(0.1, abs=1e-15)
    with pytest.raises(SizeMismatch):
        emd(a, a[:5])


@pytest.mark.parametrize("seed", range(3))
def test_emd_permutation_oracle(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(6, 3))
    b = rng.normal(size=(6, 3))
    ref = brute_emd(a, b)
    assert abs(emd(a, b) - ref) / ref < 1e-9
    assert abs(emd(a, b, exact=False) - ref) <= 1e-3


@pytest.mark.parametrize("n", [20, 128, 512])
def test_auction_within_eps(n, rng):
    a = rng.uniform(-1, 1, (n, 3))
    b = rng.uniform(-1, 1, (n, 3))
    exact = emd(a, b, exact=True)
    approx = emd(a, b, exact=False)
    assert exact - 1e-12 <= approx <= exact + 1e-3


@given(cloud, cloud)
def test_emd_properties(a, b):
    e = emd(a, b)
    assert e == pytest.approx(emd(b, a), abs=1e-12)
    lower = np.abs(np.sort(a[:, 0]) - np.sort(b[:, 0])).mean()
    assert e >= lower - 1e-12


# mmd / cov

def test_mmd_cov_identity(rng):
    clouds = [rng.normal(size=(16, 3)) for _ in range(4)]
    for metric in ("cd", "emd"):
        assert mmd_cov(clouds, clouds, metric) == (0.0, 1.0)


def test_cov_single_generated():
    D = np.array([[1.0, 2.0, 3.0, 4.0]])
    assert mmd_cov_from_matrix(D)[1] == 0.25
    # ties go to the lowest test index
    assert mmd_cov_from_matrix(np.array([[1.0, 1.0, 1.0, 1.0], [0.5, 0.5, 2.0, 2.0]]))[1] == 0.25


@pytest.mark.parametrize("metric,fn", [("cd", brute_chamfer), ("emd", brute_emd)])
def test_mmd_cov_double_loop(metric, fn):
    rng = np.random.default_rng(11)
    gen = [rng.normal(size=(6, 3)) for _ in range(5)]
    test = [rng.normal(size=(6, 3)) for _ in range(5)]
    mmd, cov = mmd_cov(gen, test, metric)
    ref_mmd, ref_cov = brute_mmd_cov(gen, test, fn)
    assert mmd == pytest.approx(ref_mmd, rel=1e-9)
    assert cov == ref_cov


def test_mmd_monotone_in_generated(rng):
    test = [rng.normal(size=(8, 3)) for _ in range(4)]
    gen = [rng.normal(size=(8, 3)) for _ in range(6)]
    values = [mmd_cov(gen[:k], test)[0] for k in range(1, 7)]
    assert all(b <= a for a, b in zip(values, values[1:]))


def test_empty_sets():
    with pytest.raises(EmptySet):
        pairwise([], [np.zeros((1, 3))])
    with pytest.raises(EmptySet):
        chamfer(np.zeros((0, 3)), np.zeros((1, 3)))


# jsd

def test_jsd_hand_value():
    expect = 0.5 * math.log(1 / 0.75) + 0.5 * (0.5 * math.log(0.5 / 0.75) + 0.5 * math.log(0.5 / 0.25))
    assert abs(jsd_histograms([1.0, 0.0], [0.5, 0.5]) - expect) < 1e-12
    assert math.floor(expect * 1e4) == 2157
    assert abs(jsd_histograms([3.0, 0.0], [1.0, 1.0]) - expect) < 1e-12


def test_jsd_identities(rng):
    a = [rng.uniform(-1, 1, (100, 3)) for _ in range(3)]
    assert jsd(a, a) == 0.0
    left = [rng.uniform(-1, -0.5, (50, 3))]
    right = [rng.uniform(0.5, 1, (50, 3))]
    assert abs(jsd(left, right) - LN2) < 1e-12


@given(arrays(np.float64, 8, elements=st.floats(0, 10)), arrays(np.float64, 8, elements=st.floats(0, 10)))
def test_jsd_bounds(p, q):
    if p.sum() <= 0 or q.sum() <= 0:
        return
    v = jsd_histograms(p, q)
    assert -1e-15 <= v <= LN2 + 1e-12
    assert v == pytest.approx(jsd_histograms(q, p), abs=1e-15)


def test_histogram_clips_outside_points():
    h = occupancy_histogram([np.array([[5.0, 5.0, 5.0], [-1.0, -1.0, -1.0]])], grid_res=4)
    assert h[-1] == 1 and h[0] == 1 and h.sum() == 2


def test_set_metrics_identity(rng):
    clouds = [rng.normal(scale=0.3, size=(16, 3)) for _ in range(3)]
    m = set_metrics(clouds, clouds)
    assert (m.mmd_cd, m.mmd_emd, m.cov_cd, m.cov_emd, m.jsd) == (0.0, 0.0, 1.0, 1.0, 0.0)


def test_xyz_round_trip(tmp_path, rng):
    a = rng.normal(size=(10, 3))
    write_xyz(tmp_path / "a.xyz", a)
    np.testing.assert_allclose(read_xyz(tmp_path / "a.xyz"), a, rtol=1e-8)
