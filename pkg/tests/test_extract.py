import numpy as np
import pytest

from conftest import tiny_network_config
from occpcnn.errors import EmptyField, ParseError
from occpcnn.extract import (
    ReconstructOptions,
    evaluate_hierarchical,
    extract_mesh,
    grid_points,
    marching_cubes,
    read_grid,
    reconstruct,
    write_grid,
)
from occpcnn.geometry import Aabb
from occpcnn.train import init_params

UNIT = Aabb(np.full(3, -0.5), np.full(3, 0.5))


def sphere_occupancy(r=0.3, center=(0.0, 0.0, 0.0)):
    c = np.asarray(center)
    return lambda q: (np.linalg.norm(q - c, axis=1) <= r).astype(float)


def smooth_sphere(r=0.3, slope=4.0):
    # clipped linear ramp with Lipschitz constant `slope`
    return lambda q: np.clip(0.5 + slope * (r - np.linalg.norm(q, axis=1)), 0.0, 1.0)


def torus_occupancy(major=0.25, minor=0.1):
    def f(q):
        ring = np.hypot(q[:, 0], q[:, 1]) - major
        return (np.hypot(ring, q[:, 2]) <= minor).astype(float)
    return f


def dense(fn, bbox, r):
    return fn(grid_points(bbox, r)).reshape((r + 1,) * 3)


def test_sphere_mesh_is_closed_genus_zero():
    r = 64
    mesh = marching_cubes(dense(sphere_occupancy(), UNIT, r), origin=UNIT.min, spacing=1.0 / r)
    assert mesh.watertight
    assert mesh.euler_characteristic() == 2
    dist = np.abs(np.linalg.norm(mesh.vertices, axis=1) - 0.3)
    assert dist.max() <= 1.5 / r
    assert mesh.volume() == pytest.approx(4 / 3 * np.pi * 0.3 ** 3, rel=0.05)


def test_torus_mesh_has_genus_one():
    r = 128
    mesh = marching_cubes(dense(torus_occupancy(), UNIT, r), origin=UNIT.min, spacing=1.0 / r)
    assert mesh.watertight
    assert mesh.euler_characteristic() == 0


def test_iso_accuracy_on_smooth_field():
    r, slope = 32, 4.0
    fn = smooth_sphere(slope=slope)
    mesh = marching_cubes(dense(fn, UNIT, r), origin=UNIT.min, spacing=1.0 / r)
    err = np.abs(fn(mesh.vertices) - 0.5)
    assert err.max() <= slope * np.sqrt(3) / r


def test_vertices_interpolate_linearly():
    # a field linear in x puts every vertex exactly on the plane where it equals the iso value
    values = np.broadcast_to(np.linspace(0.0, 1.0, 5)[:, None, None], (5, 4, 4)).copy()
    mesh = marching_cubes(values, iso=0.6, spacing=0.25)
    np.testing.assert_allclose(mesh.vertices[:, 0], 0.6, atol=1e-12)
    assert not mesh.watertight  # the plane runs into the grid border


def test_outward_winding():
    r = 16
    mesh = marching_cubes(dense(sphere_occupancy(0.3), UNIT, r), origin=UNIT.min, spacing=1.0 / r)
    assert mesh.volume() > 0
    centers = mesh.vertices[mesh.triangles].mean(axis=1)
    assert np.all(np.einsum("ij,ij->i", mesh.face_normals(), centers) > 0)


@pytest.mark.parametrize("value", [0.0, 1.0])
def test_uniform_grid_has_no_crossing(value):
    with pytest.raises(EmptyField):
        marching_cubes(np.full((5, 5, 5), value))


def test_bad_grids_rejected():
    with pytest.raises(ValueError):
        marching_cubes(np.zeros((1, 4, 4)))
    g = np.zeros((3, 3, 3))
    g[1, 1, 1] = np.nan
    with pytest.raises(ValueError):
        marching_cubes(g)


def test_constant_field_stops_at_first_level():
    grid = evaluate_hierarchical(lambda q: np.zeros(len(q)), UNIT, (64, 128, 256))
    assert grid.n_evaluations == 65 ** 3
    assert grid.per_level_evaluations == [65 ** 3, 0, 0]


@pytest.mark.parametrize("fn", [sphere_occupancy(), sphere_occupancy(0.21, (0.1, -0.05, 0.02)),
                                torus_occupancy(), smooth_sphere()])
def test_hierarchical_matches_dense(fn):
    grid = evaluate_hierarchical(fn, UNIT, (16, 32, 64))
    ref = dense(fn, UNIT, 64)
    occ = grid.finest >= 0.5
    ref_occ = ref >= 0.5
    np.testing.assert_array_equal(occ, ref_occ)
    a = extract_mesh(grid)
    b = marching_cubes(ref, origin=UNIT.min, spacing=1.0 / 64)
    np.testing.assert_array_equal(a.vertices, b.vertices)
    np.testing.assert_array_equal(a.triangles, b.triangles)


def test_hierarchical_saves_evaluations():
    grid = evaluate_hierarchical(sphere_occupancy(), UNIT, (16, 32, 64))
    assert grid.n_evaluations < 0.2 * 65 ** 3
    assert grid.evaluated[0].all()
    # every corner of a crossing cell at the finest level was evaluated
    occ = grid.finest >= 0.5
    ev = grid.evaluated[-1]
    n = 64
    lo = np.ones((n, n, n), bool)
    hi = np.zeros((n, n, n), bool)
    for a in range(2):
        for b in range(2):
            for c in range(2):
                corner = occ[a:a + n, b:b + n, c:c + n]
                lo &= corner
                hi |= corner
    crossing = np.argwhere(hi & ~lo)
    for a in range(2):
        for b in range(2):
            for c in range(2):
                assert ev[crossing[:, 0] + a, crossing[:, 1] + b, crossing[:, 2] + c].all()


def test_levels_must_double():
    with pytest.raises(ValueError):
        evaluate_hierarchical(sphere_occupancy(), UNIT, (16, 48))


def test_evaluation_order_does_not_matter():
    a = evaluate_hierarchical(sphere_occupancy(), UNIT, (8, 16, 32), batch_size=7)
    b = evaluate_hierarchical(sphere_occupancy(), UNIT, (8, 16, 32), batch_size=100000)
    np.testing.assert_array_equal(a.finest, b.finest)


def test_grid_file_round_trip(tmp_path):
    v = np.random.default_rng(0).random((3, 4, 5))
    path = tmp_path / "g.ogrd"
    write_grid(v, path)
    data = path.read_bytes()
    assert data[:4] == b"OGRD"
    assert np.frombuffer(data[4:16], "<u4").tolist() == [3, 4, 5]
    body = np.frombuffer(data[16:], "<f4")
    assert body[1] == np.float32(v[1, 0, 0])  # x varies fastest
    np.testing.assert_array_equal(read_grid(path), v.astype(np.float32))
    path.write_bytes(data[:-4])
    with pytest.raises(ParseError):
        read_grid(path)
    path.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(ParseError):
        read_grid(path)


@pytest.fixture
def tiny_cloud():
    r = np.random.default_rng(2)
    d = r.normal(size=(24, 3))
    return 0.3 * d / np.linalg.norm(d, axis=1, keepdims=True)


def test_reconstruct_random_init_never_crashes(tiny_cloud):
    cfg = tiny_network_config()
    outcomes = []
    for seed in range(6):
        try:
            mesh = reconstruct(init_params(cfg, seed), tiny_cloud, ReconstructOptions(levels=(8, 16)))
            outcomes.append(mesh.n_triangles > 0)
        except EmptyField:
            outcomes.append("empty")
    assert len(outcomes) == 6


def test_reconstruct_is_deterministic(tiny_cloud):
    params = init_params(tiny_network_config(), 0)
    # bias the classifier so the field crosses 0.5 somewhere in the box
    w, b = params.fc[-1]
    params.fc[-1] = (w, np.array([0.0, 0.0]))
    opts = ReconstructOptions(levels=(8, 16))
    try:
        a, ga = reconstruct(params, tiny_cloud, opts, return_grid=True)
    except EmptyField:
        pytest.skip("random field has no crossing")
    b_, gb = reconstruct(params, tiny_cloud, opts, return_grid=True)
    np.testing.assert_array_equal(a.vertices, b_.vertices)
    np.testing.assert_array_equal(ga.finest, gb.finest)
    np.testing.assert_allclose(ga.bbox.min, tiny_cloud.min(axis=0) - 0.1)


def test_reconstruct_caps_open_fields(tiny_cloud):
    params = init_params(tiny_network_config(), 0)
    w, _ = params.fc[-1]
    w[...] = 0.0
    params.fc[-1] = (w, np.array([0.0, 5.0]))  # inside everywhere
    mesh = reconstruct(params, tiny_cloud, ReconstructOptions(levels=(4, 8)))
    assert mesh.watertight and mesh.euler_characteristic() == 2
    with pytest.raises(EmptyField):
        reconstruct(params, tiny_cloud, ReconstructOptions(levels=(4, 8), closed=False))
