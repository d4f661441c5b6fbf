"""Monte-Carlo surface and volume metrics with standard errors.

Every estimate is returned together with its standard error and sample
count so that comparisons can be made at a stated confidence.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .geometry import Aabb, TriangleMesh, nearest_surface_point, point_in_mesh, sample_surface
from .shapegen import ShapeSpec, occupancy_oracle, shape_bounds

DEFAULT_SAMPLES = 100_000


class Estimate(NamedTuple):
    value: float
    stderr: float
    n_samples: int

    def __float__(self) -> float:
        return float(self.value)


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _as_occupancy(obj, bbox: Aabb | None) -> tuple[Callable[[np.ndarray], np.ndarray], Aabb]:
    """Inside test and bounding box for a mesh, a shape spec or a callable."""
    if isinstance(obj, TriangleMesh):
        return (lambda q: point_in_mesh(obj, q)), obj.bounds()
    if isinstance(obj, ShapeSpec):
        return (lambda q: occupancy_oracle(obj, q)), shape_bounds(obj)
    if callable(obj):
        if bbox is None:
            raise ValueError("an occupancy callable needs an explicit bbox")
        return (lambda q: np.asarray(obj(q), dtype=bool)), bbox
    raise TypeError(f"cannot test occupancy of {type(obj).__name__}")


def iou(a, b, n_samples: int = DEFAULT_SAMPLES, rng=0, bbox: Aabb | None = None) -> Estimate:
    """Volumetric intersection over union.

    Points are drawn uniformly in the union of both bounding boxes (or in
    ``bbox``).  The ratio is a binomial proportion over the samples that fall
    in the union, so its standard error is ``sqrt(R (1 - R) / n_union)``.
    Meshes must be watertight.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    fa, ba = _as_occupancy(a, bbox)
    fb, bb = _as_occupancy(b, bbox)
    box = bbox if bbox is not None else ba.union(bb)
    g = _rng(rng)
    q = box.min + g.random((n_samples, 3)) * box.extent
    ia = fa(q)
    ib = fb(q)
    n_union = int(np.sum(ia | ib))
    if n_union == 0:
        return Estimate(0.0, 0.0, n_samples)
    r = float(np.sum(ia & ib)) / n_union
    return Estimate(r, float(np.sqrt(r * (1.0 - r) / n_union)), n_samples)


def _directional(a: TriangleMesh, b: TriangleMesh, n: int, g: np.random.Generator):
    sa = sample_surface(a, n, g)
    _, normals, dist = nearest_surface_point(b, sa.points)
    dots = np.abs(np.einsum("ij,ij->i", sa.normals, normals))
    return dist, dots


def chamfer_l1(a: TriangleMesh, b: TriangleMesh, n_samples: int = DEFAULT_SAMPLES, rng=0) -> Estimate:
    """Sum of the mean point-to-surface distance from ``a`` to ``b`` and from ``b`` to ``a``.

    ``n_samples`` points are drawn on each surface (area weighted).
    """
    g = _rng(rng)
    d_ab, _ = _directional(a, b, n_samples, g)
    d_ba, _ = _directional(b, a, n_samples, g)
    value = d_ab.mean() + d_ba.mean()
    se = np.sqrt(d_ab.var() / n_samples + d_ba.var() / n_samples)
    return Estimate(float(value), float(se), n_samples)


def normal_consistency(a: TriangleMesh, b: TriangleMesh, n_samples: int = DEFAULT_SAMPLES, rng=0) -> Estimate:
    """Average of the two directional mean ``|n(x) . n(y*)|`` terms, ``y*`` nearest to ``x``."""
    g = _rng(rng)
    _, c_ab = _directional(a, b, n_samples, g)
    _, c_ba = _directional(b, a, n_samples, g)
    value = 0.5 * (c_ab.mean() + c_ba.mean())
    se = 0.5 * np.sqrt(c_ab.var() / n_samples + c_ba.var() / n_samples)
    return Estimate(float(value), float(se), n_samples)


@dataclass
class MetricReport:
    iou: float
    iou_stderr: float
    chamfer_l1: float
    chamfer_stderr: float
    normal_consistency: float
    normal_stderr: float
    iou_samples: int
    surface_samples: int
    seeds: dict = field(default_factory=dict)
    name: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(**d)


def evaluate_meshes(pred: TriangleMesh, gt, n_samples: int = DEFAULT_SAMPLES,
                    surface_samples: int | None = None, seed: int = 0, name: str = "",
                    gt_mesh: TriangleMesh | None = None) -> MetricReport:
    """All three metrics between a predicted mesh and a ground truth.

    ``gt`` may be a watertight mesh or a shape spec; a spec is used for the
    volumetric test directly, while the surface metrics need ``gt_mesh``
    (or ``gt`` itself when it is a mesh).
    """
    surface_samples = n_samples if surface_samples is None else surface_samples
    surface = gt if isinstance(gt, TriangleMesh) else gt_mesh
    if surface is None:
        raise ValueError("surface metrics need a ground-truth mesh")
    seeds = {"iou": seed, "chamfer_l1": seed + 1, "normal_consistency": seed + 2}
    r_iou = iou(pred, gt, n_samples, np.random.default_rng(seeds["iou"]))
    r_ch = chamfer_l1(pred, surface, surface_samples, np.random.default_rng(seeds["chamfer_l1"]))
    r_nc = normal_consistency(pred, surface, surface_samples, np.random.default_rng(seeds["normal_consistency"]))
    return MetricReport(r_iou.value, r_iou.stderr, r_ch.value, r_ch.stderr, r_nc.value, r_nc.stderr,
                        n_samples, surface_samples, seeds, name)


def aggregate(reports: Sequence[MetricReport]) -> dict:
    """Means over shapes; the mean's standard error combines the per-shape errors."""
    if not reports:
        raise ValueError("no reports to aggregate")
    n = len(reports)
    out = {"count": n}
    for key, err in (("iou", "iou_stderr"), ("chamfer_l1", "chamfer_stderr"),
                     ("normal_consistency", "normal_stderr")):
        vals = np.array([getattr(r, key) for r in reports])
        errs = np.array([getattr(r, err) for r in reports])
        out[key] = float(vals.mean())
        out[err] = float(np.sqrt(np.sum(errs ** 2)) / n)
    return out
