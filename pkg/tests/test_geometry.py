import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from occpcnn import shapegen
from occpcnn.errors import DegenerateGeometry, NotWatertight, ParseError
from occpcnn.geometry import (
    Aabb,
    PointCloud,
    TriangleMesh,
    closest_point_on_triangles,
    load_mesh,
    load_xyz,
    nearest_surface_point,
    normalize_to_unit_cube,
    point_in_mesh,
    sample_surface,
    save_mesh,
    save_xyz,
    winding_number,
)

CUBE_OBJ = """# unit cube
v -0.5 -0.5 -0.5
v 0.5 -0.5 -0.5
v 0.5 0.5 -0.5
v -0.5 0.5 -0.5
v -0.5 -0.5 0.5
v 0.5 -0.5 0.5
v 0.5 0.5 0.5
v -0.5 0.5 0.5
f 1 4 3 2
f 5 6 7 8
f 1 2 6 5
f 2 3 7 6
f 3 4 8 7
f 4 1 5 8
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_obj_cube_is_watertight(tmp_path):
    mesh = load_mesh(write(tmp_path, "cube.obj", CUBE_OBJ))
    assert mesh.n_vertices == 8
    assert mesh.n_triangles == 12
    assert mesh.watertight
    assert mesh.euler_characteristic() == 2
    assert mesh.volume() == pytest.approx(1.0)


def test_off_single_triangle_is_open(tmp_path):
    mesh = load_mesh(write(tmp_path, "tri.off", "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n"))
    assert mesh.n_triangles == 1
    assert not mesh.watertight


def test_obj_out_of_range_index(tmp_path):
    with pytest.raises(ParseError):
        load_mesh(write(tmp_path, "bad.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 4\n"))


def test_obj_garbage_is_parse_error(tmp_path):
    with pytest.raises(ParseError):
        load_mesh(write(tmp_path, "bad.obj", "v 0 0 zero\nf 1 2 3\n"))


def test_zero_area_face(tmp_path):
    text = "v 0 0 0\nv 1 0 0\nv 2 0 0\nv 0 1 0\nf 1 2 3\nf 1 2 4\n"
    with pytest.raises(DegenerateGeometry):
        load_mesh(write(tmp_path, "flat.obj", text))


def test_negative_obj_indices(tmp_path):
    mesh = load_mesh(write(tmp_path, "neg.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n"))
    assert mesh.triangles.tolist() == [[0, 1, 2]]


@pytest.mark.parametrize("ext", ["obj", "off"])
def test_mesh_round_trip(tmp_path, ext):
    mesh = shapegen.make_primitive(shapegen.torus(0.3, 0.1), 2)
    path = tmp_path / f"m.{ext}"
    save_mesh(mesh, path)
    back = load_mesh(path)
    np.testing.assert_allclose(back.vertices, mesh.vertices, rtol=1e-8, atol=1e-9)
    np.testing.assert_array_equal(back.triangles, mesh.triangles)
    assert back.watertight


def test_xyz_round_trip(tmp_path, rng):
    pts = rng.normal(size=(10, 3))
    save_xyz(pts, tmp_path / "p.xyz")
    np.testing.assert_allclose(load_xyz(tmp_path / "p.xyz"), pts, atol=5e-9)


def test_xyz_bad_columns(tmp_path):
    with pytest.raises(ParseError):
        load_xyz(write(tmp_path, "p.xyz", "1 2\n3 4\n"))


def test_normalize_cube_0_2():
    verts = np.array([[x, y, z] for x in (0, 2) for y in (0, 2) for z in (0, 2)], dtype=float)
    mesh = TriangleMesh(verts, [[0, 1, 2]])
    out, tf = normalize_to_unit_cube(mesh)
    assert tf.scale == pytest.approx(0.5)
    np.testing.assert_allclose(tf.translation, [-0.5, -0.5, -0.5])
    np.testing.assert_allclose(out.bounds().min, [-0.5] * 3)
    np.testing.assert_allclose(out.bounds().max, [0.5] * 3)
    np.testing.assert_allclose(tf.inverse().apply(out.vertices), verts, atol=1e-12)


def test_normalize_elongated_and_idempotent():
    mesh = shapegen.make_primitive(shapegen.box((4.0, 1.0, 1.0)))
    out, _ = normalize_to_unit_cube(mesh)
    np.testing.assert_allclose(out.bounds().extent, [1.0, 0.25, 0.25])
    again, tf = normalize_to_unit_cube(out)
    assert tf.scale == pytest.approx(1.0, abs=1e-9)
    np.testing.assert_allclose(tf.translation, 0.0, atol=1e-9)
    np.testing.assert_allclose(again.vertices, out.vertices, atol=1e-9)


def test_normalize_degenerate():
    with pytest.raises(DegenerateGeometry):
        normalize_to_unit_cube(TriangleMesh(np.zeros((3, 3)), [[0, 1, 2]]))


def test_sample_surface_on_cube(cube, rng):
    pc = sample_surface(cube, 2048, rng)
    assert len(pc) == 2048
    np.testing.assert_allclose(np.abs(pc.points).max(axis=1), 0.5, atol=1e-12)
    np.testing.assert_allclose(np.linalg.norm(pc.normals, axis=1), 1.0, atol=1e-12)
    # normal is the axis of the face the point sits on
    axis = np.argmax(np.abs(pc.normals), axis=1)
    np.testing.assert_allclose(np.abs(pc.points[np.arange(2048), axis]), 0.5, atol=1e-12)


def test_sample_surface_deterministic(cube):
    a = sample_surface(cube, 100, np.random.default_rng(5))
    b = sample_surface(cube, 100, np.random.default_rng(5))
    np.testing.assert_array_equal(a.points, b.points)


def test_sample_surface_area_weights():
    # one triangle holds 90% of the area
    verts = np.array([[0, 0, 0], [3, 0, 0], [0, 3, 0], [10, 0, 0], [11, 0, 0], [10, 1, 0]], dtype=float)
    mesh = TriangleMesh(verts, [[0, 1, 2], [3, 4, 5]])
    mesh2 = TriangleMesh(verts, [[0, 1, 2], [3, 4, 5], [3, 5, 4]])
    w = mesh.face_areas() / mesh.face_areas().sum()
    assert w[0] == pytest.approx(0.9)
    pc = sample_surface(mesh, 2048, np.random.default_rng(0))
    frac = np.mean(pc.points[:, 0] < 5)
    assert abs(frac - 0.9) < 0.03
    # chi-square at n=1e5 over three faces with unequal areas
    from scipy.stats import chisquare

    n = 100_000
    pc = sample_surface(mesh2, n, np.random.default_rng(1))
    big = pc.points[:, 0] < 5
    up = pc.normals[:, 2] > 0
    counts = [big.sum(), (~big & up).sum(), (~big & ~up).sum()]
    expected = n * mesh2.face_areas() / mesh2.face_areas().sum()
    assert chisquare(counts, expected).pvalue > 0.01


def test_point_in_cube_examples(cube):
    assert point_in_mesh(cube, [0, 0, 0]) is True
    assert point_in_mesh(cube, [0.6, 0, 0]) is False


def test_point_in_mesh_requires_watertight():
    mesh = TriangleMesh(np.eye(3), [[0, 1, 2]])
    with pytest.raises(NotWatertight):
        point_in_mesh(mesh, [0, 0, 0])


@pytest.mark.parametrize("spec", [
    shapegen.sphere(0.4),
    shapegen.box((0.6, 0.4, 0.2)),
    shapegen.torus(0.3, 0.1),
    shapegen.cylinder(0.2, 0.6),
], ids=["sphere", "box", "torus", "cylinder"])
def test_point_in_mesh_matches_winding_number(spec):
    mesh = shapegen.make_primitive(spec)
    q = np.random.default_rng(7).uniform(-0.55, 0.55, size=(1000, 3))
    ray = point_in_mesh(mesh, q)
    wn = np.abs(winding_number(mesh, q)) > 0.5
    assert np.array_equal(ray, wn)


def test_point_in_mesh_grazing_queries(cube):
    # axis-aligned queries through edges and vertices of the tessellation
    g = np.linspace(-0.75, 0.75, 7)
    q = np.stack(np.meshgrid(g, g, g, indexing="ij"), -1).reshape(-1, 3)
    q = q[np.abs(np.abs(q).max(axis=1) - 0.5) > 1e-9]  # skip points exactly on the surface
    expected = np.abs(q).max(axis=1) < 0.5
    assert np.array_equal(point_in_mesh(cube, q), expected)


def test_winding_number_values(cube):
    np.testing.assert_allclose(winding_number(cube, [[0, 0, 0], [2, 0, 0]]), [1.0, 0.0], atol=1e-12)


def test_nearest_cube_example(cube):
    p, n, d = nearest_surface_point(cube, [0.7, 0.0, 0.0])
    np.testing.assert_allclose(p, [0.5, 0, 0], atol=1e-12)
    np.testing.assert_allclose(n, [1, 0, 0], atol=1e-12)
    assert d == pytest.approx(0.2)


def test_nearest_on_surface_is_zero(cube, rng):
    pc = sample_surface(cube, 50, rng)
    _, _, d = nearest_surface_point(cube, pc.points)
    np.testing.assert_allclose(d, 0.0, atol=1e-12)


def brute_force_distance(mesh, x):
    a, b, c = mesh.corners()
    out = []
    for p in np.atleast_2d(x):
        cp = closest_point_on_triangles(np.broadcast_to(p, a.shape), a, b, c)
        out.append(np.linalg.norm(cp - p, axis=1).min())
    return np.array(out)


def test_nearest_matches_brute_force():
    mesh = shapegen.make_primitive(shapegen.torus(0.3, 0.12), 3)
    x = np.random.default_rng(3).uniform(-0.6, 0.6, size=(100, 3))
    p, _, d = nearest_surface_point(mesh, x)
    np.testing.assert_allclose(d, brute_force_distance(mesh, x), atol=1e-9)
    np.testing.assert_allclose(np.linalg.norm(p - x, axis=1), d, atol=1e-12)


def closest_point_reference(p, a, b, c):
    """Minimise over a fine barycentric grid plus the three edges in closed form."""
    best = None
    for u, v in [(a, b), (b, c), (c, a)]:
        t = np.clip(np.dot(p - u, v - u) / np.dot(v - u, v - u), 0, 1)
        cand = u + t * (v - u)
        if best is None or np.linalg.norm(cand - p) < np.linalg.norm(best - p):
            best = cand
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    proj = p - np.dot(p - a, n) * n
    m = np.array([b - a, c - a]).T
    uv = np.linalg.lstsq(m, proj - a, rcond=None)[0]
    if uv.min() >= 0 and uv.sum() <= 1 and np.linalg.norm(proj - p) < np.linalg.norm(best - p):
        best = proj
    return best


coord = st.floats(-1, 1, allow_nan=False)
vec = st.tuples(coord, coord, coord).map(np.array)


@given(vec, vec, vec, vec)
def test_closest_point_on_triangle_property(p, a, b, c):
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a))
    if area < 1e-3:
        return
    got = closest_point_on_triangles(p[None], a[None], b[None], c[None])[0]
    ref = closest_point_reference(p, a, b, c)
    assert np.linalg.norm(got - p) == pytest.approx(np.linalg.norm(ref - p), abs=1e-9)


@given(st.lists(vec, min_size=1, max_size=5))
def test_nearest_distance_bounded_by_vertices(xs):
    mesh = shapegen.make_primitive(shapegen.sphere(0.3), 1)
    x = np.array(xs)
    _, _, d = nearest_surface_point(mesh, x)
    vd = np.linalg.norm(mesh.vertices[None] - x[:, None], axis=2).min(axis=1)
    assert np.all(d <= vd + 1e-12)


def test_aabb_and_cloud_validation():
    with pytest.raises(ValueError):
        Aabb(np.ones(3), np.zeros(3))
    with pytest.raises(ValueError):
        PointCloud(np.zeros((0, 3)))
    box = Aabb(np.zeros(3), np.ones(3)).padded(0.1)
    np.testing.assert_allclose(box.extent, 1.2)
