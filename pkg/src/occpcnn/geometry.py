"""Triangle meshes, point clouds and the spatial queries built on them.

Meshes are plain indexed triangle lists.  The heavier queries
(:func:`point_in_mesh`, :func:`nearest_surface_point`) are vectorised over
query batches and use small acceleration structures that are built once per
mesh and cached on it.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateGeometry, NotWatertight, ParseError

DEGENERATE_AREA = 1e-12
GRAZING_TOL = 1e-9
MAX_RAY_RETRIES = 8


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValueError(f"Aabb min {lo} exceeds max {hi}")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def from_points(cls, points) -> "Aabb":
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        return cls(pts.min(axis=0), pts.max(axis=0))

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    def padded(self, pad: float) -> "Aabb":
        return Aabb(self.min - pad, self.max + pad)

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.min, other.min), np.maximum(self.max, other.max))


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) == 0:
            raise ValueError("point cloud must be nonempty")
        if self.normals is not None:
            self.normals = np.ascontiguousarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape != self.points.shape:
                raise ValueError("normals must match points")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class TriangleMesh:
    """Indexed triangle mesh.

    ``watertight`` is computed on construction: every undirected edge must be
    used by exactly two triangles, once in each direction.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    watertight: bool = field(init=False)
    _cache: dict = field(init=False, repr=False, compare=False, default_factory=dict)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (
            self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)
        ):
            raise ParseError("triangle index out of range")
        self.watertight = is_watertight(self.triangles)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def corners(self):
        v = self.vertices
        t = self.triangles
        return v[t[:, 0]], v[t[:, 1]], v[t[:, 2]]

    def face_areas(self) -> np.ndarray:
        a, b, c = self.corners()
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def face_normals(self) -> np.ndarray:
        if "normals" not in self._cache:
            a, b, c = self.corners()
            n = np.cross(b - a, c - a)
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            with np.errstate(invalid="ignore", divide="ignore"):
                n = np.where(norm > 0, n / norm, 0.0)
            self._cache["normals"] = n
        return self._cache["normals"]

    def bounds(self) -> Aabb:
        return Aabb.from_points(self.vertices)

    def euler_characteristic(self) -> int:
        edges = np.sort(_directed_edges(self.triangles), axis=1)
        n_edges = len(np.unique(edges, axis=0))
        n_verts = len(np.unique(self.triangles))
        return int(n_verts - n_edges + self.n_triangles)

    def volume(self) -> float:
        a, b, c = self.corners()
        return float(np.einsum("ij,ij->i", a, np.cross(b, c)).sum() / 6.0)

    def transformed(self, rotation=None, translation=None, scale: float = 1.0) -> "TriangleMesh":
        v = self.vertices * scale
        if rotation is not None:
            v = v @ np.asarray(rotation, dtype=np.float64).T
        if translation is not None:
            v = v + np.asarray(translation, dtype=np.float64)
        return TriangleMesh(v, self.triangles.copy())


def _directed_edges(triangles: np.ndarray) -> np.ndarray:
    t = triangles
    return np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])


def is_watertight(triangles: np.ndarray) -> bool:
    if len(triangles) == 0:
        return False
    directed = _directed_edges(np.asarray(triangles, dtype=np.int64))
    n = int(directed.max()) + 1
    key = directed[:, 0] * n + directed[:, 1]
    if len(np.unique(key)) != len(key):
        return False
    reverse = directed[:, 1] * n + directed[:, 0]
    return bool(np.all(np.isin(reverse, key)))


# ---------------------------------------------------------------------------
# file formats


def _parse_index(token: str, n_vertices: int) -> int:
    idx = int(token.split("/")[0])
    return idx - 1 if idx > 0 else n_vertices + idx


def _read_obj(text: str):
    verts, faces = [], []
    for lineno, line in enumerate(text.splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif parts[0] == "f":
                idx = [_parse_index(tok, len(verts)) for tok in parts[1:]]
                if len(idx) < 3:
                    raise ValueError("face needs at least 3 vertices")
                faces.extend([idx[0], idx[k], idx[k + 1]] for k in range(1, len(idx) - 1))
        except ValueError as exc:
            raise ParseError(f"OBJ line {lineno}: {exc}") from None
    return verts, faces


def _read_off(text: str):
    tokens = [ln.split("#")[0].split() for ln in text.splitlines()]
    tokens = [t for t in tokens if t]
    if not tokens or not tokens[0][0].upper().endswith("OFF"):
        raise ParseError("missing OFF header")
    head = tokens[0][1:] if len(tokens[0]) > 1 else tokens[1]
    body = tokens[1:] if len(tokens[0]) > 1 else tokens[2:]
    try:
        nv, nf = int(head[0]), int(head[1])
        verts = [[float(x) for x in row[:3]] for row in body[:nv]]
        faces = []
        for row in body[nv:nv + nf]:
            k = int(row[0])
            idx = [int(x) for x in row[1:k + 1]]
            if len(idx) != k or k < 3:
                raise ValueError("bad face record")
            faces.extend([idx[0], idx[j], idx[j + 1]] for j in range(1, k - 1))
    except (ValueError, IndexError) as exc:
        raise ParseError(f"OFF: {exc}") from None
    if len(verts) != nv or any(len(v) != 3 for v in verts):
        raise ParseError("OFF: truncated vertex list")
    return verts, faces


def load_mesh(path, format: str | None = None) -> TriangleMesh:
    """Read an ASCII OBJ or OFF file.

    Triangles with repeated vertex indices are dropped; any remaining face
    with area at most ``DEGENERATE_AREA`` (measured after scaling the mesh to
    a unit longest side) raises :class:`DegenerateGeometry`.
    """
    path = os.fspath(path)
    fmt = (format or os.path.splitext(path)[1].lstrip(".")).upper()
    with open(path, "r", encoding="ascii", errors="replace") as fh:
        text = fh.read()
    if fmt == "OBJ":
        verts, faces = _read_obj(text)
    elif fmt == "OFF":
        verts, faces = _read_off(text)
    else:
        raise ParseError(f"unsupported mesh format {fmt!r}")
    if not verts or not faces:
        raise ParseError("mesh has no vertices or faces")
    tris = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if tris.min() < 0 or tris.max() >= len(verts):
        raise ParseError("face index out of range")
    keep = (tris[:, 0] != tris[:, 1]) & (tris[:, 1] != tris[:, 2]) & (tris[:, 2] != tris[:, 0])
    mesh = TriangleMesh(np.asarray(verts), tris[keep])
    if mesh.n_triangles == 0:
        raise DegenerateGeometry("no non-degenerate faces")
    longest = float(mesh.bounds().extent.max())
    if longest <= 0 or np.any(mesh.face_areas() / longest**2 <= DEGENERATE_AREA):
        raise DegenerateGeometry("zero-area face")
    return mesh


def save_mesh(mesh: TriangleMesh, path, format: str | None = None) -> None:
    path = os.fspath(path)
    fmt = (format or os.path.splitext(path)[1].lstrip(".")).upper()
    lines = []
    if fmt == "OBJ":
        lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    elif fmt == "OFF":
        lines += ["OFF", f"{mesh.n_vertices} {mesh.n_triangles} 0"]
        lines += [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
        lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    else:
        raise ValueError(f"unsupported mesh format {fmt!r}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_xyz(path) -> np.ndarray:
    try:
        pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if pts.shape[1] < 3:
        raise ParseError(f"{path}: expected 3 columns")
    return pts[:, :3]


def save_xyz(points, path, decimals: int = 8) -> None:
    fmt = f"%.{decimals}f"
    np.savetxt(path, np.asarray(points, dtype=np.float64).reshape(-1, 3), fmt=fmt)


# ---------------------------------------------------------------------------
# normalisation and sampling


@dataclass(frozen=True)
class Transform:
    """``x -> scale * x + translation``."""

    scale: float
    translation: np.ndarray

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) + self.translation

    def inverse(self) -> "Transform":
        return Transform(1.0 / self.scale, -self.translation / self.scale)


def normalize_to_unit_cube(mesh: TriangleMesh) -> tuple[TriangleMesh, Transform]:
    """Scale so the longest bounding-box side is 1 and center it at the origin."""
    if mesh.n_vertices == 0:
        raise DegenerateGeometry("empty mesh")
    box = mesh.bounds()
    longest = float(box.extent.max())
    if longest <= 0:
        raise DegenerateGeometry("bounding box has zero extent")
    scale = 1.0 / longest
    transform = Transform(scale, -scale * box.center)
    return TriangleMesh(transform.apply(mesh.vertices), mesh.triangles.copy()), transform


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> PointCloud:
    """Area-weighted uniform samples on the surface, with face normals."""
    if n < 1:
        raise ValueError("n must be >= 1")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise DegenerateGeometry("mesh has zero surface area")
    face = rng.choice(mesh.n_triangles, size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    a, b, c = (x[face] for x in mesh.corners())
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return PointCloud(pts, mesh.face_normals()[face])


# ---------------------------------------------------------------------------
# inside / outside


def _orthonormal_frame(direction: np.ndarray) -> np.ndarray:
    d = direction / np.linalg.norm(direction)
    helper = np.eye(3)[np.argmin(np.abs(d))]
    e1 = np.cross(d, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(d, e1)
    return np.stack([e1, e2, d])


class _RayCaster:
    """Parity ray casting along one fixed direction.

    Triangles are projected onto the plane orthogonal to the ray and binned
    in a uniform 2D grid, so each query only tests the triangles whose
    projected bounding box covers its cell.
    """

    def __init__(self, mesh: TriangleMesh, direction: np.ndarray, tol: float = GRAZING_TOL):
        self.tol = tol
        frame = _orthonormal_frame(np.asarray(direction, dtype=np.float64))
        self.frame = frame
        proj = mesh.vertices @ frame.T
        t = mesh.triangles
        self.uv = np.stack([proj[t[:, k], :2] for k in range(3)], axis=1)  # (m, 3, 2)
        self.w = np.stack([proj[t[:, k], 2] for k in range(3)], axis=1)  # (m, 3)
        a, b, c = self.uv[:, 0], self.uv[:, 1], self.uv[:, 2]
        self.area2 = _cross2(b - a, c - a)
        edges = np.stack([b - a, c - b, a - c], axis=1)
        self.edge_len = np.linalg.norm(edges, axis=2)
        longest = self.edge_len.max(axis=1)
        self.valid = np.abs(self.area2) > tol * np.maximum(longest, tol)

        m = len(t)
        lo = self.uv.min(axis=1) - tol
        hi = self.uv.max(axis=1) + tol
        self.origin = lo.min(axis=0) if m else np.zeros(2)
        span = (hi.max(axis=0) - self.origin) if m else np.ones(2)
        self.res = int(np.clip(np.sqrt(m), 1, 256))
        self.cell = np.maximum(span / self.res, 1e-12)
        i0 = self._cell_of(lo)
        i1 = self._cell_of(hi)
        nx = i1[:, 0] - i0[:, 0] + 1
        ny = i1[:, 1] - i0[:, 1] + 1
        counts = nx * ny
        tri_ids = np.repeat(np.arange(m), counts)
        local = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        cx = i0[tri_ids, 0] + local % nx[tri_ids]
        cy = i0[tri_ids, 1] + local // nx[tri_ids]
        cell_ids = cx * self.res + cy
        order = np.argsort(cell_ids, kind="stable")
        self.cell_tris = tri_ids[order]
        self.cell_start = np.searchsorted(cell_ids[order], np.arange(self.res * self.res + 1))

    def _cell_of(self, uv: np.ndarray) -> np.ndarray:
        idx = np.floor((uv - self.origin) / self.cell).astype(np.int64)
        return np.clip(idx, 0, self.res - 1)

    def cast(self, queries: np.ndarray, chunk: int = 20000):
        """Return (inside, grazing) boolean arrays for ``queries``."""
        inside = np.zeros(len(queries), dtype=bool)
        grazing = np.zeros(len(queries), dtype=bool)
        for s in range(0, len(queries), chunk):
            q = queries[s:s + chunk]
            ins, gr = self._cast_chunk(q)
            inside[s:s + chunk] = ins
            grazing[s:s + chunk] = gr
        return inside, grazing

    def _cast_chunk(self, queries: np.ndarray):
        n = len(queries)
        proj = queries @ self.frame.T
        quv, qw = proj[:, :2], proj[:, 2]
        cells = self._cell_of(quv)
        cid = cells[:, 0] * self.res + cells[:, 1]
        start = self.cell_start[cid]
        counts = self.cell_start[cid + 1] - start
        qi = np.repeat(np.arange(n), counts)
        offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
        ti = self.cell_tris[np.repeat(start, counts) + offs]
        keep = self.valid[ti]
        qi, ti = qi[keep], ti[keep]

        p = quv[qi]
        uv = self.uv[ti]
        sign = np.sign(self.area2[ti])
        e_c = _cross2(uv[:, 1] - uv[:, 0], p - uv[:, 0]) * sign
        e_a = _cross2(uv[:, 2] - uv[:, 1], p - uv[:, 1]) * sign
        e_b = _cross2(uv[:, 0] - uv[:, 2], p - uv[:, 2]) * sign
        lens = self.edge_len[ti]
        dist = np.stack([e_c / lens[:, 0], e_a / lens[:, 1], e_b / lens[:, 2]], axis=1)
        dmin = dist.min(axis=1)
        tol = self.tol
        near = dmin > -tol
        absarea = np.abs(self.area2[ti])
        w = self.w[ti]
        w_hit = (e_a * w[:, 0] + e_b * w[:, 1] + e_c * w[:, 2]) / absarea
        ahead = w_hit - qw[qi]
        edge_hit = near & (dmin <= tol)
        on_surface = near & (np.abs(ahead) <= tol)
        graze = edge_hit & (ahead > -tol) | on_surface
        hit = near & (dmin > tol) & (ahead > tol)

        crossings = np.bincount(qi[hit], minlength=n)
        grazing = np.bincount(qi[graze], minlength=n) > 0
        return crossings % 2 == 1, grazing


def _cross2(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def _random_direction(rng: np.random.Generator) -> np.ndarray:
    d = rng.normal(size=3)
    return d / np.linalg.norm(d)


def point_in_mesh(mesh: TriangleMesh, q, rng: np.random.Generator | None = None):
    """Inside test by ray parity.

    A random ray direction is drawn for the batch; queries whose ray passes
    within ``GRAZING_TOL`` of an edge or vertex (or that lie on the surface)
    are retried with fresh directions, up to ``MAX_RAY_RETRIES`` times, and
    then decided by the winding number.  Returns a bool for a single point,
    otherwise a bool array.
    """
    if not mesh.watertight:
        raise NotWatertight("point_in_mesh requires a watertight mesh")
    rng = np.random.default_rng(0x1D) if rng is None else rng
    pts = np.asarray(q, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    inside = np.zeros(len(pts), dtype=bool)
    todo = np.arange(len(pts))
    for _ in range(1 + MAX_RAY_RETRIES):
        if len(todo) == 0:
            break
        caster = _RayCaster(mesh, _random_direction(rng))
        ins, graze = caster.cast(pts[todo])
        inside[todo[~graze]] = ins[~graze]
        todo = todo[graze]
    if len(todo):
        inside[todo] = np.abs(winding_number(mesh, pts[todo])) >= 0.5
    return bool(inside[0]) if single else inside


def winding_number(mesh: TriangleMesh, q, chunk: int = 2_000_000) -> np.ndarray:
    """Generalised winding number via summed triangle solid angles."""
    pts = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    a0, b0, c0 = mesh.corners()
    out = np.zeros(len(pts))
    step = max(1, chunk // max(1, mesh.n_triangles))
    for s in range(0, len(pts), step):
        p = pts[s:s + step, None, :]
        a, b, c = a0[None] - p, b0[None] - p, c0[None] - p
        la = np.linalg.norm(a, axis=2)
        lb = np.linalg.norm(b, axis=2)
        lc = np.linalg.norm(c, axis=2)
        num = np.einsum("qtk,qtk->qt", a, np.cross(b, c))
        den = (la * lb * lc + np.einsum("qtk,qtk->qt", a, b) * lc
               + np.einsum("qtk,qtk->qt", b, c) * la + np.einsum("qtk,qtk->qt", c, a) * lb)
        out[s:s + step] = (2.0 * np.arctan2(num, den)).sum(axis=1) / (4 * np.pi)
    return out


# ---------------------------------------------------------------------------
# nearest point


def closest_point_on_triangles(p, a, b, c) -> np.ndarray:
    """Closest point on triangle (a, b, c) to p, all arrays of shape (n, 3)."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v_in = np.where(denom != 0, vb / denom, 0.0)
        w_in = np.where(denom != 0, vc / denom, 0.0)
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))

    out = a + ab * v_in[:, None] + ac * w_in[:, None]
    # Voronoi regions, applied from lowest to highest priority
    m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    out[m] = b[m] + (c[m] - b[m]) * t_bc[m, None]
    m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    out[m] = a[m] + ac[m] * t_ac[m, None]
    m = (d6 >= 0) & (d5 <= d6)
    out[m] = c[m]
    m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    out[m] = a[m] + ab[m] * t_ab[m, None]
    m = (d3 >= 0) & (d4 <= d3)
    out[m] = b[m]
    m = (d1 <= 0) & (d2 <= 0)
    out[m] = a[m]
    return out


class _TriangleLocator:
    def __init__(self, mesh: TriangleMesh):
        a, b, c = mesh.corners()
        self.a, self.b, self.c = a, b, c
        self.centroids = (a + b + c) / 3.0
        radii = np.max(np.stack([np.linalg.norm(x - self.centroids, axis=1) for x in (a, b, c)]), axis=0)
        self.radii = radii
        self.rmax = float(radii.max())
        self.tree = cKDTree(self.centroids)
        self.m = len(a)

    def _eval(self, pts, qi, ti):
        cp = closest_point_on_triangles(pts[qi], self.a[ti], self.b[ti], self.c[ti])
        return cp, np.linalg.norm(pts[qi] - cp, axis=1)

    def _best(self, pts, qi, ti):
        """Nearest candidate per query; ``qi`` must be grouped (non-decreasing).

        Ties go to the lowest triangle index.
        """
        cp, d = self._eval(pts, qi, ti)
        starts = np.flatnonzero(np.r_[True, qi[1:] != qi[:-1]])
        dmin = np.minimum.reduceat(d, starts)
        seg = np.repeat(np.arange(len(starts)), np.diff(np.r_[starts, len(qi)]))
        tie = np.where(d == dmin[seg], ti, np.iinfo(np.int64).max)
        tmin = np.minimum.reduceat(tie, starts)
        rows = np.flatnonzero((tie == tmin[seg]) & (d == dmin[seg]))
        rows = rows[np.r_[True, seg[rows][1:] != seg[rows][:-1]]]
        return qi[rows], ti[rows], cp[rows], d[rows]

    def query(self, pts: np.ndarray, chunk: int = 4096):
        n = len(pts)
        best_d = np.empty(n)
        best_t = np.empty(n, dtype=np.int64)
        best_p = np.empty((n, 3))
        k = min(8, self.m)
        for s in range(0, n, chunk):
            sub = pts[s:s + chunk]
            m = len(sub)
            cd, ci = self.tree.query(sub, k=k)
            cd = cd.reshape(m, -1)
            ci = ci.reshape(m, -1)
            qi, ti, cp, d = self._best(sub, np.repeat(np.arange(m), ci.shape[1]), ci.ravel())
            # a triangle not among the k nearest centroids can still be closer
            # only if its centroid lies within best + rmax; gather all of those
            open_ = np.flatnonzero(cd[:, -1] - self.rmax <= d) if k < self.m else np.empty(0, np.int64)
            if len(open_):
                lists = self.tree.query_ball_point(sub[open_], d[open_] + self.rmax)
                lengths = np.fromiter((len(x) for x in lists), dtype=np.int64, count=len(lists))
                flat = np.concatenate([np.asarray(x, dtype=np.int64) for x in lists])
                q2 = np.repeat(open_, lengths)
                # cheaper per-triangle bound before the exact distance
                keep = np.linalg.norm(sub[q2] - self.centroids[flat], axis=1) - self.radii[flat] <= d[q2]
                q2, t2, p2, d2 = self._best(sub, q2[keep], flat[keep])
                d[q2], ti[q2], cp[q2] = d2, t2, p2
            best_d[s:s + m] = d
            best_t[s:s + m] = ti
            best_p[s:s + m] = cp
        return best_p, best_t, best_d


def nearest_surface_point(mesh: TriangleMesh, x):
    """Closest surface point, the normal of its triangle, and the distance.

    Accepts a single point or an (n, 3) batch.  Exact: candidate triangles are
    pruned with a centroid k-d tree and a bound on triangle radius.
    """
    if mesh.n_triangles == 0:
        raise DegenerateGeometry("empty mesh")
    loc = mesh._cache.get("locator")
    if loc is None:
        loc = mesh._cache["locator"] = _TriangleLocator(mesh)
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    p, t, d = loc.query(pts)
    normals = mesh.face_normals()[t]
    if single:
        return p[0], normals[0], float(d[0])
    return p, normals, d


def nearest_triangle(mesh: TriangleMesh, x) -> np.ndarray:
    if "locator" not in mesh._cache:
        mesh._cache["locator"] = _TriangleLocator(mesh)
    return mesh._cache["locator"].query(np.asarray(x, dtype=np.float64).reshape(-1, 3))[1]
