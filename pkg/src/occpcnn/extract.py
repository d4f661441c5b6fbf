"""Mesh extraction from an occupancy field.

The field is sampled coarse-to-fine: only cells whose corners disagree about
occupancy (plus a dilation margin) are refined, and the finest grid is
polygonised with a table-driven marching cubes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.ndimage import binary_dilation

from ._mc_tables import CORNER_OFFSETS, EDGE_CORNERS, TRIANGLE_TABLE
from .errors import EmptyField, ParseError
from .geometry import Aabb, PointCloud, TriangleMesh

_CORNERS = np.array(CORNER_OFFSETS, dtype=np.int64)
_TRI = np.full((256, 15), -1, dtype=np.int64)
for _case, _row in enumerate(TRIANGLE_TABLE):
    _TRI[_case, :len(_row)] = _row
_EDGE_START = np.minimum(_CORNERS[[a for a, _ in EDGE_CORNERS]], _CORNERS[[b for _, b in EDGE_CORNERS]])
_EDGE_AXIS = np.argmax(np.abs(_CORNERS[[a for a, _ in EDGE_CORNERS]] - _CORNERS[[b for _, b in EDGE_CORNERS]]), axis=1)


def marching_cubes(values, iso: float = 0.5, origin=(0.0, 0.0, 0.0), spacing=1.0) -> TriangleMesh:
    """Polygonise the level set ``values == iso`` of a dense grid.

    Grid point ``(i, j, k)`` sits at ``origin + (i, j, k) * spacing``.  The
    region ``values >= iso`` is treated as the interior and triangles are
    wound with outward normals.  Vertices on shared cell edges are shared,
    so the mesh is closed whenever the level set stays off the grid border.
    """
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 3 or min(v.shape) < 2:
        raise ValueError("values must be a 3D grid with at least 2 points per axis")
    if not np.all(np.isfinite(v)):
        raise ValueError("grid values must be finite")
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (3,))
    origin = np.asarray(origin, dtype=np.float64)
    below = v < iso
    nx, ny, nz = v.shape
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.int64)
    for bit, (a, b, c) in enumerate(CORNER_OFFSETS):
        case |= below[a:nx - 1 + a, b:ny - 1 + b, c:nz - 1 + c].astype(np.int64) << bit
    cells = np.argwhere((case != 0) & (case != 255))
    if len(cells) == 0:
        raise EmptyField("field does not cross the iso level")
    edges = _TRI[case[cells[:, 0], cells[:, 1], cells[:, 2]]]  # (n, 15)
    valid = edges >= 0
    cell_of = np.repeat(np.arange(len(cells)), valid.sum(axis=1))
    local_edge = edges[valid]
    start = cells[cell_of] + _EDGE_START[local_edge]
    axis = _EDGE_AXIS[local_edge]
    lin = (start[:, 0] * ny + start[:, 1]) * nz + start[:, 2]
    gid = axis * (nx * ny * nz) + lin
    uniq, inverse = np.unique(gid, return_inverse=True)

    u_axis = uniq // (nx * ny * nz)
    u_lin = uniq % (nx * ny * nz)
    p0 = np.stack(np.unravel_index(u_lin, v.shape), axis=1)
    p1 = p0 + np.eye(3, dtype=np.int64)[u_axis]
    v0 = v[p0[:, 0], p0[:, 1], p0[:, 2]]
    v1 = v[p1[:, 0], p1[:, 1], p1[:, 2]]
    t = (iso - v0) / (v1 - v0)
    pos = origin + (p0 + t[:, None] * (p1 - p0)) * spacing
    tris = inverse.reshape(-1, 3)
    return TriangleMesh(pos, tris)


def grid_points(bbox: Aabb, resolution: int) -> np.ndarray:
    """Corner positions of a ``resolution``-cell grid, C order, shape (r+1)^3 x 3."""
    axes = [np.linspace(bbox.min[k], bbox.max[k], resolution + 1) for k in range(3)]
    return np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, 3)


@dataclass
class MultiResGrid:
    bbox: Aabb
    levels: list[int]
    values: list[np.ndarray]
    evaluated: list[np.ndarray]
    dilation: int
    iso: float
    n_evaluations: int = 0
    per_level_evaluations: list[int] = field(default_factory=list)

    @property
    def finest(self) -> np.ndarray:
        return self.values[-1]

    @property
    def spacing(self) -> np.ndarray:
        return self.bbox.extent / self.levels[-1]


def _upsample(values: np.ndarray) -> np.ndarray:
    """Trilinear refinement: (n+1)^3 corners -> (2n+1)^3 corners."""
    out = values
    for ax in range(3):
        n = out.shape[ax]
        shape = list(out.shape)
        shape[ax] = 2 * n - 1
        fine = np.empty(shape)
        even = [slice(None)] * 3
        odd = [slice(None)] * 3
        even[ax] = slice(0, None, 2)
        odd[ax] = slice(1, None, 2)
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(0, n - 1)
        hi[ax] = slice(1, n)
        fine[tuple(even)] = out
        fine[tuple(odd)] = 0.5 * (out[tuple(lo)] + out[tuple(hi)])
        out = fine
    return out


def _active_cells(values: np.ndarray, iso: float) -> np.ndarray:
    occ = values >= iso
    n = np.array(values.shape) - 1
    lo = np.ones(tuple(n), dtype=bool)
    hi = np.zeros(tuple(n), dtype=bool)
    for a, b, c in CORNER_OFFSETS:
        corner = occ[a:a + n[0], b:b + n[1], c:c + n[2]]
        lo &= corner
        hi |= corner
    return hi & ~lo


def evaluate_hierarchical(field_fn: Callable[[np.ndarray], np.ndarray], bbox: Aabb,
                          levels: Sequence[int] = (64, 128, 256), dilation: int = 1,
                          iso: float = 0.5, batch_size: int = 65536) -> MultiResGrid:
    """Coarse-to-fine sampling of ``field_fn`` over ``bbox``.

    The first level is evaluated densely.  At each refinement, cells whose
    corners straddle ``iso`` are marked, split into their eight children,
    dilated by ``dilation`` cells of the finer level, and only corners of
    the marked fine cells are evaluated.  Remaining fine corners take the trilinear interpolation
    of the coarse values.
    """
    levels = [int(r) for r in levels]
    if not levels or any(levels[i + 1] != 2 * levels[i] for i in range(len(levels) - 1)):
        raise ValueError("levels must double at each step")

    def run(points: np.ndarray) -> np.ndarray:
        out = np.empty(len(points))
        for s in range(0, len(points), batch_size):
            out[s:s + batch_size] = field_fn(points[s:s + batch_size])
        return out

    r0 = levels[0]
    values = run(grid_points(bbox, r0)).reshape((r0 + 1,) * 3)
    evaluated = np.ones_like(values, dtype=bool)
    grid = MultiResGrid(bbox, levels, [values], [evaluated], dilation, iso,
                        values.size, [values.size])
    for r in levels[1:]:
        coarse_active = _active_cells(values, iso)
        active = np.zeros((r, r, r), dtype=bool)
        for a in range(2):
            for b in range(2):
                for c in range(2):
                    active[a::2, b::2, c::2] = coarse_active
        if dilation > 0 and active.any():
            active = binary_dilation(active, structure=np.ones((3, 3, 3), dtype=bool), iterations=dilation)
        fine = _upsample(values)
        prev = np.zeros(fine.shape, dtype=bool)
        prev[::2, ::2, ::2] = evaluated
        want = np.zeros(fine.shape, dtype=bool)
        for a, b, c in CORNER_OFFSETS:
            want[a:a + r, b:b + r, c:c + r] |= active
        todo = want & ~prev
        idx = np.argwhere(todo)
        if len(idx):
            pts = bbox.min + idx * (bbox.extent / r)
            fine[todo] = run(pts)
        evaluated = prev | todo
        values = fine
        grid.values.append(values)
        grid.evaluated.append(evaluated)
        grid.per_level_evaluations.append(len(idx))
        grid.n_evaluations += len(idx)
    return grid


def extract_mesh(grid: MultiResGrid) -> TriangleMesh:
    return marching_cubes(grid.finest, grid.iso, origin=grid.bbox.min, spacing=grid.spacing)


def write_grid(values: np.ndarray, path) -> None:
    """Dense grid dump: b"OGRD", three uint32 sizes, float32 values x-fastest."""
    v = np.asarray(values)
    with open(path, "wb") as fh:
        fh.write(b"OGRD")
        fh.write(struct.pack("<3I", *v.shape))
        fh.write(np.asarray(v, dtype="<f4").ravel(order="F").tobytes())


def read_grid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != b"OGRD" or len(data) < 16:
        raise ParseError("not an OGRD grid file")
    shape = struct.unpack("<3I", data[4:16])
    body = np.frombuffer(data[16:], dtype="<f4")
    if body.size != int(np.prod(shape)):
        raise ParseError("OGRD payload size does not match header")
    return body.reshape(shape, order="F")


@dataclass
class ReconstructOptions:
    levels: tuple = (64, 128, 256)
    iso: float = 0.5
    dilation: int = 1
    padding: float = 0.1
    batch_size: int = 16384
    closed: bool = True


def reconstruct(params, cloud, options: ReconstructOptions | None = None,
                return_grid: bool = False):
    """Occupancy network -> hierarchical grid -> marching cubes.

    The grid spans the cloud's bounding box padded by ``options.padding``.
    With ``options.closed`` the finest grid gets one extra layer of exterior
    values on every side, so a field that is still inside at the box border
    is capped there and the mesh is always watertight.
    Raises :class:`EmptyField` when the predicted field has no crossing.
    """
    from .occnet import FieldEvaluator

    opts = options or ReconstructOptions()
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    field_fn = FieldEvaluator(params, points)
    bbox = Aabb.from_points(points).padded(opts.padding)
    grid = evaluate_hierarchical(field_fn, bbox, opts.levels, opts.dilation, opts.iso, opts.batch_size)
    if opts.closed:
        fill = min(0.0, opts.iso - 1.0)
        values = np.pad(grid.finest, 1, constant_values=fill)
        mesh = marching_cubes(values, opts.iso, origin=bbox.min - grid.spacing, spacing=grid.spacing)
    else:
        mesh = extract_mesh(grid)
    return (mesh, grid) if return_grid else mesh
