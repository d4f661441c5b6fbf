"""Procedural watertight shapes and labelled training samples.

Shapes are spheres, boxes, tori and cylinders with a rigid pose, or unions
("composites") of them.  Every shape has an exact analytic inside test and
an exact area-uniform surface sampler; tessellated meshes are only needed
for the mesh-based oracles and for metrics.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import EmptyShape, InvalidSpec
from .geometry import Aabb, PointCloud, TriangleMesh, load_xyz, save_xyz

PRIMITIVES = ("sphere", "box", "torus", "cylinder")
COORD_DECIMALS = 8


@dataclass
class ShapeSpec:
    """A primitive or a union of primitives.

    ``params`` per kind: sphere ``radius``; box ``size`` (three full side
    lengths); torus ``major``, ``minor``; cylinder ``radius``, ``height``
    (axis along local z).  The pose maps local to world coordinates as
    ``x_world = rotation @ x_local + translation``.  Composite parts carry
    their own poses; the composite's pose is ignored.
    """

    kind: str
    params: dict = field(default_factory=dict)
    parts: list = field(default_factory=list)
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self) -> None:
        if self.kind == "composite":
            if len(self.parts) < 2:
                raise InvalidSpec("composite needs at least 2 parts")
            for part in self.parts:
                if part.kind == "composite":
                    raise InvalidSpec("nested composites are not supported")
            return
        if self.kind not in PRIMITIVES:
            raise InvalidSpec(f"unknown shape kind {self.kind!r}")
        try:
            dims = np.atleast_1d(np.concatenate([np.ravel(v) for v in self.params.values()]))
        except ValueError:
            dims = np.array([])
        required = {"sphere": 1, "box": 3, "torus": 2, "cylinder": 2}[self.kind]
        if dims.size != required or not np.all(dims > 0):
            raise InvalidSpec(f"{self.kind} needs {required} positive dimensions, got {self.params}")
        if self.kind == "torus" and self.params["minor"] >= self.params["major"]:
            raise InvalidSpec("torus minor radius must be below major radius")

    @property
    def primitives(self) -> list["ShapeSpec"]:
        return list(self.parts) if self.kind == "composite" else [self]

    def to_dict(self) -> dict:
        if self.kind == "composite":
            return {"kind": "composite", "parts": [p.to_dict() for p in self.parts]}
        params = {k: (list(map(float, v)) if np.ndim(v) else float(v)) for k, v in self.params.items()}
        return {
            "kind": self.kind,
            "params": params,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ShapeSpec":
        if d.get("kind") == "composite":
            return cls("composite", parts=[cls.from_dict(p) for p in d["parts"]])
        try:
            return cls(
                d["kind"],
                dict(d["params"]),
                rotation=d.get("rotation", np.eye(3)),
                translation=d.get("translation", np.zeros(3)),
            )
        except KeyError as exc:
            raise InvalidSpec(f"missing field {exc}") from None


def sphere(radius: float, center=(0.0, 0.0, 0.0)) -> ShapeSpec:
    return ShapeSpec("sphere", {"radius": float(radius)}, translation=center)


def box(size, center=(0.0, 0.0, 0.0), rotation=None) -> ShapeSpec:
    return ShapeSpec("box", {"size": [float(s) for s in size]}, translation=center,
                     rotation=np.eye(3) if rotation is None else rotation)


def torus(major: float, minor: float, center=(0.0, 0.0, 0.0), rotation=None) -> ShapeSpec:
    return ShapeSpec("torus", {"major": float(major), "minor": float(minor)}, translation=center,
                     rotation=np.eye(3) if rotation is None else rotation)


def cylinder(radius: float, height: float, center=(0.0, 0.0, 0.0), rotation=None) -> ShapeSpec:
    return ShapeSpec("cylinder", {"radius": float(radius), "height": float(height)},
                     translation=center, rotation=np.eye(3) if rotation is None else rotation)


def union(*parts: ShapeSpec) -> ShapeSpec:
    return ShapeSpec("composite", parts=list(parts))


# ---------------------------------------------------------------------------
# tessellation


def _icosphere(level: int):
    t = (1 + 5 ** 0.5) / 2
    v = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    f = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ])
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    for _ in range(level):
        edges = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        mid = v[uniq].mean(axis=1)
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = inv.reshape(3, -1).T + len(v)
        a, b, c = f.T
        ab, bc, ca = m.T
        f = np.concatenate([
            np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1),
        ])
        v = np.concatenate([v, mid])
    return v, f


def _box_mesh(size):
    h = 0.5 * np.asarray(size, dtype=np.float64)
    v = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64) * h
    # vertex index = 4*ix + 2*iy + iz
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    f = []
    for a, b, c, d in quads:
        f += [(a, b, c), (a, c, d)]
    return v, np.array(f)


def _torus_mesh(major, minor, n_major, n_minor):
    u = 2 * np.pi * np.arange(n_major) / n_major
    w = 2 * np.pi * np.arange(n_minor) / n_minor
    uu, ww = np.meshgrid(u, w, indexing="ij")
    ring = major + minor * np.cos(ww)
    v = np.stack([ring * np.cos(uu), ring * np.sin(uu), minor * np.sin(ww)], axis=-1).reshape(-1, 3)
    i, j = np.meshgrid(np.arange(n_major), np.arange(n_minor), indexing="ij")
    i1, j1 = (i + 1) % n_major, (j + 1) % n_minor
    a = i * n_minor + j
    b = i1 * n_minor + j
    c = i1 * n_minor + j1
    d = i * n_minor + j1
    f = np.concatenate([np.stack([a, b, c], -1).reshape(-1, 3), np.stack([a, c, d], -1).reshape(-1, 3)])
    return v, f


def _cylinder_mesh(radius, height, segments):
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], -1)
    h = height / 2
    v = np.concatenate([
        np.column_stack([ring, np.full(segments, -h)]),
        np.column_stack([ring, np.full(segments, h)]),
        [[0, 0, -h], [0, 0, h]],
    ])
    k = np.arange(segments)
    k1 = (k + 1) % segments
    bot, top = 2 * segments, 2 * segments + 1
    f = np.concatenate([
        np.stack([k, k1, k1 + segments], 1),
        np.stack([k, k1 + segments, k + segments], 1),
        np.stack([np.full(segments, bot), k1, k], 1),
        np.stack([np.full(segments, top), k + segments, k1 + segments], 1),
    ])
    return v, f


def make_primitive(spec: ShapeSpec, resolution: int = 3) -> TriangleMesh:
    """Watertight, outward-wound tessellation of a posed primitive.

    ``resolution`` is the icosphere subdivision level for spheres and scales
    the segment counts of tori (16r x 8r) and cylinders (16r).
    """
    if spec.kind == "composite":
        raise InvalidSpec("make_primitive needs a primitive spec")
    if resolution < 1:
        raise InvalidSpec("resolution must be >= 1")
    p = spec.params
    if spec.kind == "sphere":
        v, f = _icosphere(resolution)
        v = v * p["radius"]
    elif spec.kind == "box":
        v, f = _box_mesh(p["size"])
    elif spec.kind == "torus":
        v, f = _torus_mesh(p["major"], p["minor"], 16 * resolution, 8 * resolution)
    else:
        v, f = _cylinder_mesh(p["radius"], p["height"], 16 * resolution)
    return TriangleMesh(v @ spec.rotation.T + spec.translation, f)


# ---------------------------------------------------------------------------
# analytic queries


def _to_local(spec: ShapeSpec, q: np.ndarray) -> np.ndarray:
    return (q - spec.translation) @ spec.rotation


def _primitive_inside(spec: ShapeSpec, q: np.ndarray) -> np.ndarray:
    x = _to_local(spec, q)
    p = spec.params
    if spec.kind == "sphere":
        return np.einsum("ij,ij->i", x, x) < p["radius"] ** 2
    if spec.kind == "box":
        return np.all(np.abs(x) < 0.5 * np.asarray(p["size"]), axis=1)
    if spec.kind == "torus":
        rho = np.hypot(x[:, 0], x[:, 1])
        return (rho - p["major"]) ** 2 + x[:, 2] ** 2 < p["minor"] ** 2
    return (x[:, 0] ** 2 + x[:, 1] ** 2 < p["radius"] ** 2) & (np.abs(x[:, 2]) < p["height"] / 2)


def occupancy_oracle(spec: ShapeSpec, q):
    """Exact indicator of the solid; a union over parts for composites."""
    pts = np.asarray(q, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    inside = np.zeros(len(pts), dtype=bool)
    for part in spec.primitives:
        inside |= _primitive_inside(part, pts)
    return bool(inside[0]) if single else inside


def primitive_area(spec: ShapeSpec) -> float:
    p = spec.params
    if spec.kind == "sphere":
        return 4 * np.pi * p["radius"] ** 2
    if spec.kind == "box":
        a, b, c = p["size"]
        return 2 * (a * b + b * c + c * a)
    if spec.kind == "torus":
        return 4 * np.pi ** 2 * p["major"] * p["minor"]
    return 2 * np.pi * p["radius"] * (p["height"] + p["radius"])


def shape_bounds(spec: ShapeSpec) -> Aabb:
    """Exact axis-aligned bounds of the posed shape."""
    box_ = None
    for part in spec.primitives:
        R = part.rotation
        p = part.params
        if part.kind == "sphere":
            half = np.full(3, p["radius"])
        elif part.kind == "box":
            half = np.abs(R) @ (0.5 * np.asarray(p["size"]))
        else:
            axis_z = np.abs(R[:, 2])
            planar = np.sqrt(np.clip(1 - axis_z ** 2, 0, None))
            if part.kind == "torus":
                half = p["major"] * planar + p["minor"]
            else:
                half = 0.5 * p["height"] * axis_z + p["radius"] * planar
        b = Aabb(part.translation - half, part.translation + half)
        box_ = b if box_ is None else box_.union(b)
    return box_


def scale_spec(spec: ShapeSpec, scale: float, shift) -> ShapeSpec:
    """Apply ``x -> scale * x + shift`` to a shape."""
    shift = np.asarray(shift, dtype=np.float64)
    if spec.kind == "composite":
        return union(*(scale_spec(p, scale, shift) for p in spec.parts))
    params = {k: (np.asarray(v) * scale).tolist() if np.ndim(v) else float(v) * scale
              for k, v in spec.params.items()}
    return ShapeSpec(spec.kind, params, rotation=spec.rotation,
                     translation=spec.translation * scale + shift)


def rotate_spec(spec: ShapeSpec, rotation) -> ShapeSpec:
    """Rigidly rotate a shape about the origin."""
    r = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
    if spec.kind == "composite":
        return union(*(rotate_spec(p, r) for p in spec.parts))
    return ShapeSpec(spec.kind, dict(spec.params), rotation=r @ spec.rotation,
                     translation=r @ spec.translation)


def normalize_spec(spec: ShapeSpec) -> ShapeSpec:
    """Fit the shape into the origin-centered unit cube (longest side 1)."""
    b = shape_bounds(spec)
    s = 1.0 / float(b.extent.max())
    return scale_spec(spec, s, -s * b.center)


# ---------------------------------------------------------------------------
# surface sampling


def _sample_primitive_local(spec: ShapeSpec, n: int, rng: np.random.Generator):
    p = spec.params
    if spec.kind == "sphere":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * p["radius"], d
    if spec.kind == "box":
        s = np.asarray(p["size"], dtype=np.float64)
        face_area = np.array([s[1] * s[2], s[0] * s[2], s[0] * s[1]])
        axis = rng.choice(3, size=n, p=face_area / face_area.sum())
        side = rng.choice([-1.0, 1.0], size=n)
        pts = (rng.random((n, 3)) - 0.5) * s
        pts[np.arange(n), axis] = side * s[axis] / 2
        nrm = np.zeros((n, 3))
        nrm[np.arange(n), axis] = side
        return pts, nrm
    if spec.kind == "torus":
        R, r = p["major"], p["minor"]
        u = np.empty(0)
        w = np.empty(0)
        while len(u) < n:
            uu = rng.random(2 * n) * 2 * np.pi
            ww = rng.random(2 * n) * 2 * np.pi
            acc = rng.random(2 * n) * (R + r) < R + r * np.cos(ww)
            u = np.concatenate([u, uu[acc]])
            w = np.concatenate([w, ww[acc]])
        u, w = u[:n], w[:n]
        nrm = np.stack([np.cos(w) * np.cos(u), np.cos(w) * np.sin(u), np.sin(w)], 1)
        ring = np.stack([R * np.cos(u), R * np.sin(u), np.zeros(n)], 1)
        return ring + r * nrm, nrm
    rad, h = p["radius"], p["height"]
    side_area = 2 * np.pi * rad * h
    cap_area = np.pi * rad ** 2
    region = rng.choice(3, size=n, p=np.array([side_area, cap_area, cap_area]) / (side_area + 2 * cap_area))
    ang = rng.random(n) * 2 * np.pi
    pts = np.zeros((n, 3))
    nrm = np.zeros((n, 3))
    on_side = region == 0
    pts[on_side, 0] = rad * np.cos(ang[on_side])
    pts[on_side, 1] = rad * np.sin(ang[on_side])
    pts[on_side, 2] = (rng.random(on_side.sum()) - 0.5) * h
    nrm[on_side, 0] = np.cos(ang[on_side])
    nrm[on_side, 1] = np.sin(ang[on_side])
    cap = ~on_side
    rr = rad * np.sqrt(rng.random(cap.sum()))
    pts[cap, 0] = rr * np.cos(ang[cap])
    pts[cap, 1] = rr * np.sin(ang[cap])
    z = np.where(region[cap] == 1, -1.0, 1.0)
    pts[cap, 2] = z * h / 2
    nrm[cap, 2] = z
    return pts, nrm


def sample_shape_surface(spec: ShapeSpec, n: int, rng: np.random.Generator) -> PointCloud:
    """Area-uniform samples on the boundary of the solid, with outward normals.

    For composites, part surfaces are sampled in proportion to their areas
    and samples buried inside another part are rejected.
    """
    parts = spec.primitives
    areas = np.array([primitive_area(p) for p in parts])
    got_p, got_n, count = [], [], 0
    while count < n:
        m = max(2 * (n - count), 64)
        which = rng.choice(len(parts), size=m, p=areas / areas.sum())
        pts = np.empty((m, 3))
        nrm = np.empty((m, 3))
        for k, part in enumerate(parts):
            sel = which == k
            lp, ln = _sample_primitive_local(part, int(sel.sum()), rng)
            pts[sel] = lp @ part.rotation.T + part.translation
            nrm[sel] = ln @ part.rotation.T
        keep = np.ones(m, dtype=bool)
        if len(parts) > 1:
            for k, part in enumerate(parts):
                keep &= ~((which != k) & _primitive_inside(part, pts))
        got_p.append(pts[keep])
        got_n.append(nrm[keep])
        count += int(keep.sum())
        if count == 0 and m > 10 * n:
            raise EmptyShape("shape has no exposed surface")
    return PointCloud(np.concatenate(got_p)[:n], np.concatenate(got_n)[:n])


# ---------------------------------------------------------------------------
# ground-truth meshes


def composite_ground_truth_mesh(spec: ShapeSpec, grid_resolution: int = 128) -> TriangleMesh:
    """Single watertight surface of the solid by marching cubes over the oracle."""
    from .extract import marching_cubes

    if grid_resolution < 32:
        raise InvalidSpec("grid_resolution must be >= 32")
    b = shape_bounds(spec)
    cell = float(b.extent.max()) / (grid_resolution - 4)
    lo = b.min - 2 * cell
    counts = np.ceil((b.max + 2 * cell - lo) / cell).astype(int) + 1
    axes = [lo[k] + cell * np.arange(counts[k]) for k in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)
    values = occupancy_oracle(spec, grid).astype(np.float64).reshape(tuple(counts))
    if not values.any():
        raise EmptyShape("no grid vertex lies inside the shape")
    return marching_cubes(values, 0.5, origin=lo, spacing=cell)


def ground_truth_mesh(spec: ShapeSpec, resolution: int = 4, grid_resolution: int = 128) -> TriangleMesh:
    """Tessellation for primitives, marching-cubes surface for composites."""
    if spec.kind == "composite":
        return composite_ground_truth_mesh(spec, grid_resolution)
    return make_primitive(spec, resolution)


# ---------------------------------------------------------------------------
# training samples


@dataclass
class SamplingConfig:
    pool_size: int = 2048
    input_size: int = 300
    noise_sd: float = 0.05
    near_queries: int = 6144
    near_sd: float = 0.02
    far_queries: int = 2048
    far_sd: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("pool_size", "input_size", "near_queries", "far_queries"):
            if getattr(self, name) < 1:
                raise InvalidSpec(f"{name} must be >= 1")
        if self.input_size > self.pool_size:
            raise InvalidSpec("input_size cannot exceed pool_size")
        if self.noise_sd < 0 or self.near_sd <= 0 or self.far_sd <= 0:
            raise InvalidSpec("standard deviations must be positive")


@dataclass
class TrainingSample:
    cloud: PointCloud
    queries: np.ndarray
    labels: np.ndarray
    shape_id: str
    spec: ShapeSpec | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64).reshape(-1, 3)
        self.labels = np.asarray(self.labels, dtype=bool).ravel()
        if len(self.queries) != len(self.labels):
            raise ValueError("queries and labels differ in length")


def _quantize(x: np.ndarray) -> np.ndarray:
    # snap to the on-disk decimal grid so labels survive a save/load round trip
    return np.round(x, COORD_DECIMALS)


def make_training_sample(spec: ShapeSpec, cfg: SamplingConfig, rng: np.random.Generator,
                         shape_id: str = "shape") -> TrainingSample:
    # queries come before the input subset so that corpora differing only in
    # input_size share their queries and labels
    pool = sample_shape_surface(spec, cfg.pool_size, rng).points
    near = sample_shape_surface(spec, cfg.near_queries, rng).points
    near = near + rng.normal(scale=cfg.near_sd, size=near.shape)
    far = sample_shape_surface(spec, cfg.far_queries, rng).points
    far = far + rng.normal(scale=cfg.far_sd, size=far.shape)
    queries = _quantize(np.concatenate([near, far]))
    pick = rng.choice(cfg.pool_size, size=cfg.input_size, replace=False)
    cloud = pool[pick] + rng.normal(scale=cfg.noise_sd, size=(cfg.input_size, 3)) if cfg.noise_sd > 0 \
        else pool[pick].copy()
    if cfg.noise_sd > 0:
        cloud = _quantize(cloud)
    labels = occupancy_oracle(spec, queries)
    return TrainingSample(PointCloud(cloud), queries, labels, shape_id, spec,
                          {"config": asdict(cfg)})


def random_shape(rng: np.random.Generator, max_parts: int = 4, min_parts: int = 1) -> ShapeSpec:
    """Random pose-and-size primitive or union, normalised to the unit cube."""
    n_parts = int(rng.integers(min_parts, max_parts + 1))
    parts: list[ShapeSpec] = []
    radii: list[float] = []
    for k in range(n_parts):
        kind = PRIMITIVES[int(rng.integers(len(PRIMITIVES)))]
        rot = Rotation.random(random_state=rng).as_matrix()
        if kind == "sphere":
            params = {"radius": float(rng.uniform(0.2, 0.4))}
            extent = params["radius"]
        elif kind == "box":
            size = rng.uniform(0.25, 0.8, size=3)
            params = {"size": size.tolist()}
            extent = float(np.linalg.norm(size) / 2)
        elif kind == "torus":
            major = float(rng.uniform(0.25, 0.4))
            params = {"major": major, "minor": float(major * rng.uniform(0.3, 0.5))}
            extent = params["major"] + params["minor"]
        else:
            params = {"radius": float(rng.uniform(0.12, 0.3)), "height": float(rng.uniform(0.3, 0.8))}
            extent = float(np.hypot(params["radius"], params["height"] / 2))
        if k == 0:
            center = np.zeros(3)
        else:
            anchor = int(rng.integers(k))
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            center = parts[anchor].translation + d * (radii[anchor] + extent) * rng.uniform(0.3, 0.6)
        parts.append(ShapeSpec(kind, params, rotation=rot, translation=center))
        radii.append(extent)
    spec = parts[0] if n_parts == 1 else union(*parts)
    return normalize_spec(spec)


# ---------------------------------------------------------------------------
# corpus and on-disk format

SPLITS = ("train", "val", "test")


@dataclass
class CorpusConfig:
    n_train: int = 500
    n_val: int = 50
    n_test: int = 50
    max_parts: int = 4
    seed: int = 0
    sampling: SamplingConfig = field(default_factory=SamplingConfig)

    @classmethod
    def from_dict(cls, d: dict) -> "CorpusConfig":
        d = dict(d)
        sampling = SamplingConfig(**d.pop("sampling", {}))
        return cls(sampling=sampling, **d)


def shape_rng(seed: int, split: str, index: int, stream: int) -> np.random.Generator:
    """Independent generator per (corpus seed, split, shape index, purpose)."""
    return np.random.default_rng([seed, SPLITS.index(split), index, stream])


def corpus_specs(cfg: CorpusConfig) -> dict[str, list[ShapeSpec]]:
    sizes = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    return {
        split: [random_shape(shape_rng(cfg.seed, split, i, 0), cfg.max_parts) for i in range(n)]
        for split, n in sizes.items()
    }


def make_corpus(cfg: CorpusConfig, splits=SPLITS) -> dict[str, list[TrainingSample]]:
    specs = corpus_specs(cfg)
    out = {}
    for split in splits:
        out[split] = [
            make_training_sample(spec, cfg.sampling, shape_rng(cfg.seed, split, i, 1), f"{split}_{i:04d}")
            for i, spec in enumerate(specs[split])
        ]
    return out


def save_sample(sample: TrainingSample, directory) -> None:
    os.makedirs(directory, exist_ok=True)
    save_xyz(sample.cloud.points, os.path.join(directory, "cloud.xyz"), COORD_DECIMALS)
    save_xyz(sample.queries, os.path.join(directory, "queries.xyz"), COORD_DECIMALS)
    with open(os.path.join(directory, "labels.txt"), "w") as fh:
        fh.write("\n".join("1" if v else "0" for v in sample.labels) + "\n")
    side = {"shape_id": sample.shape_id, **sample.meta}
    if sample.spec is not None:
        side["spec"] = sample.spec.to_dict()
    with open(os.path.join(directory, "sample.json"), "w") as fh:
        json.dump(side, fh, indent=2, sort_keys=True)


def load_sample(directory) -> TrainingSample:
    with open(os.path.join(directory, "sample.json")) as fh:
        side = json.load(fh)
    cloud = load_xyz(os.path.join(directory, "cloud.xyz"))
    queries = load_xyz(os.path.join(directory, "queries.xyz"))
    labels = np.loadtxt(os.path.join(directory, "labels.txt"), dtype=np.int64, ndmin=1).astype(bool)
    spec = ShapeSpec.from_dict(side.pop("spec")) if "spec" in side else None
    shape_id = side.pop("shape_id")
    return TrainingSample(PointCloud(cloud), queries, labels, shape_id, spec, side)


def load_split(corpus_dir, split: str) -> list[TrainingSample]:
    root = os.path.join(corpus_dir, split)
    names = sorted(n for n in os.listdir(root) if os.path.isdir(os.path.join(root, n)))
    return [load_sample(os.path.join(root, n)) for n in names]
