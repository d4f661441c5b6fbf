"""Continuous point convolution with Gaussian bases.

Features on a point set are extended to a volumetric field by placing an
unnormalised Gaussian ``exp(-|r|^2 / sigma2)`` at each point, convolved with
a kernel made of 27 Gaussians of the same width on a ``{-d, 0, d}^3`` grid,
and sampled again at arbitrary target points.  The Gaussian-Gaussian
convolution has a closed form, so the whole chain reduces to

    out[x, k] = b[k] + C * sum_{i, j, m} F[i, j] w[j, k, m]
                           * exp(-|x - p_i - t_m|^2 / (2 sigma2))

with ``C = (pi * sigma2 / 2) ** 1.5``.

Gradients come from a small reverse-mode :class:`Tape`.  Point positions and
the pooling structure are treated as constants.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatch, TapeIncomplete

N_KERNEL = 27
# index m = 9 * (sx + 1) + 3 * (sy + 1) + (sz + 1)
KERNEL_STEPS = np.array(list(itertools.product((-1, 0, 1), repeat=3)), dtype=np.float64)
CUTOFF = 4.0


def conv_constant(sigma2: float) -> float:
    """Integral of exp(-|y|^2/s) exp(-|x-y|^2/s) over R^3 at x = 0."""
    return (np.pi * sigma2 / 2.0) ** 1.5


@dataclass
class LayerParams:
    weights: np.ndarray  # (J_in, J_out, 27)
    bias: np.ndarray  # (J_out,)
    sigma2: float
    spacing: float | None = None  # kernel grid step d; defaults to sigma

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64).ravel()
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if self.weights.ndim != 3 or self.weights.shape[2] != N_KERNEL:
            raise DimensionMismatch(f"weights must be (J, K, 27), got {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[1],):
            raise DimensionMismatch("bias length must equal output channels")
        if self.spacing is None:
            self.spacing = float(np.sqrt(self.sigma2))

    @property
    def channels(self) -> tuple[int, int]:
        return self.weights.shape[0], self.weights.shape[1]

    @property
    def translations(self) -> np.ndarray:
        return KERNEL_STEPS * self.spacing


@dataclass
class FeatureSet:
    points: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features[:, None]
        if len(self.features) != len(self.points):
            raise DimensionMismatch("one feature row per point required")


# ---------------------------------------------------------------------------
# Gaussian response tensors


def gaussian_tensor(targets: np.ndarray, sources: np.ndarray, sigma2: float, spacing: float,
                    cutoff: float | None = None) -> np.ndarray:
    """``G[n, m, i] = exp(-|x_n - p_i - t_m|^2 / (2 sigma2))``, shape (N, 27, I).

    The squared distance splits over axes, so each entry is a product of
    three one-dimensional factors.  With ``cutoff`` set, entries whose
    distance exceeds ``cutoff * sigma`` are zeroed.
    """
    x = np.asarray(targets, dtype=np.float64)
    p = np.asarray(sources, dtype=np.float64)
    steps = np.array([-spacing, 0.0, spacing])
    inv = -0.5 / sigma2
    factors = []
    for a in range(3):
        delta = x[:, a, None] - p[None, :, a]  # (N, I)
        factors.append(np.exp(inv * (delta[:, None, :] - steps[None, :, None]) ** 2))  # (N, 3, I)
    e1, e2, e3 = factors
    g = (e1[:, :, None, None, :] * e2[:, None, :, None, :]) * e3[:, None, None, :, :]
    g = g.reshape(len(x), N_KERNEL, len(p))
    if cutoff is not None:
        g[g < np.exp(-0.5 * cutoff ** 2)] = 0.0
    return g


def _contract(g: np.ndarray, f: np.ndarray, w: np.ndarray, route: str | None = None):
    """sum_{m, i, j} g[n, m, i] f[i, j] w[j, k, m] -> (N, K), plus a cache for backward.

    Contracts features first or weights first, whichever needs fewer flops.
    """
    n, _, i = g.shape
    j, k, _ = w.shape
    if route is None:
        route = "f" if n * i * j + n * j * k < i * j * k + n * i * k else "w"
    if route == "f":
        t = (g.reshape(n * N_KERNEL, i) @ f).reshape(n, N_KERNEL * j)
        wr = w.transpose(2, 0, 1).reshape(N_KERNEL * j, k)
        return t @ wr, ("f", t, wr)
    h = np.tensordot(f, w, axes=(1, 0)).transpose(2, 0, 1).reshape(N_KERNEL * i, k)
    return g.reshape(n, N_KERNEL * i) @ h, ("w", None, None)


def _contract_backward(g, f, w, cache, dout, need_df: bool):
    n, _, i = g.shape
    j, k, _ = w.shape
    route, t, wr = cache
    if route == "f":
        dw = (t.T @ dout).reshape(N_KERNEL, j, k).transpose(1, 2, 0)
        df = None
        if need_df:
            dt = (dout @ wr.T).reshape(n * N_KERNEL, j)
            df = g.reshape(n * N_KERNEL, i).T @ dt
        return df, dw
    dh = (g.reshape(n, N_KERNEL * i).T @ dout).reshape(N_KERNEL, i, k)
    dw = np.tensordot(f, dh, axes=(0, 1)).transpose(0, 2, 1)  # (J, K, 27)
    df = np.tensordot(dh, w, axes=([0, 2], [2, 1])) if need_df else None
    return df, dw


def extend_conv_restrict(source: FeatureSet, params: LayerParams, targets,
                         cutoff: float | None = None, scale: float | None = None,
                         chunk: int = 4096) -> FeatureSet:
    """Closed-form extension, volumetric convolution and restriction.

    ``scale`` replaces the analytic constant ``C(sigma2)`` when given.
    ``cutoff`` (in units of sigma) drops Gaussian responses beyond that
    radius and skips sources that cannot reach a chunk of targets.
    """
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 3)
    j, k = params.channels
    if source.features.shape[1] != j:
        raise DimensionMismatch(f"features have {source.features.shape[1]} channels, weights expect {j}")
    c = conv_constant(params.sigma2) if scale is None else scale
    out = np.empty((len(targets), k))
    tree = cKDTree(source.points) if cutoff is not None else None
    sigma = np.sqrt(params.sigma2)
    reach = (cutoff + np.sqrt(3.0) * params.spacing / sigma) * sigma if cutoff is not None else None
    for s in range(0, len(targets), chunk):
        x = targets[s:s + chunk]
        if tree is None:
            idx = slice(None)
        else:
            lo, hi = x.min(axis=0), x.max(axis=0)
            idx = np.array(tree.query_ball_point((lo + hi) / 2, reach + np.linalg.norm(hi - lo) / 2), dtype=np.int64)
            idx.sort()
            if len(idx) == 0:
                out[s:s + chunk] = params.bias
                continue
        g = gaussian_tensor(x, source.points[idx], params.sigma2, params.spacing, cutoff)
        val, _ = _contract(g, source.features[idx], params.weights)
        out[s:s + chunk] = c * val + params.bias
    return FeatureSet(targets, out)


def point_upsample(coarse: FeatureSet, params: LayerParams, fine_points, **kwargs) -> FeatureSet:
    """Transposed-convolution style expansion: the same operator onto a finer set."""
    return extend_conv_restrict(coarse, params, fine_points, **kwargs)


# ---------------------------------------------------------------------------
# farthest-point sampling and pooling


def canonical_start(points: np.ndarray) -> int:
    """Point farthest from the centroid (lowest index on ties).

    Independent of point order, translation and rotation.
    """
    p = np.asarray(points, dtype=np.float64)
    d = np.einsum("ij,ij->i", p - p.mean(axis=0), p - p.mean(axis=0))
    return int(np.flatnonzero(d == d.max())[0])


def fps(points, n: int, seed: int | None = None, start: int | None = None) -> np.ndarray:
    """Greedy farthest-point sampling.

    The first index is ``start`` if given, else drawn from ``seed`` if given,
    else :func:`canonical_start`.  Each further pick maximises the distance
    to the already chosen set; ties go to the lowest index.
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not 1 <= n <= len(p):
        raise ValueError(f"n must be in [1, {len(p)}]")
    if start is None:
        start = int(np.random.default_rng(seed).integers(len(p))) if seed is not None else canonical_start(p)
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = start
    d = np.einsum("ij,ij->i", p - p[start], p - p[start])
    for s in range(1, n):
        nxt = int(np.argmax(d))
        chosen[s] = nxt
        d = np.minimum(d, np.einsum("ij,ij->i", p - p[nxt], p - p[nxt]))
    return chosen


def nearest_assignment(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return cKDTree(centers).query(points)[1].astype(np.int64)


def segment_max(features: np.ndarray, assign: np.ndarray, n_out: int):
    """Channelwise max per segment and the (first) argmax row of each."""
    order = np.argsort(assign, kind="stable")
    sorted_f = features[order]
    sorted_a = assign[order]
    starts = np.searchsorted(sorted_a, np.arange(n_out))
    if np.any(np.diff(np.append(starts, len(order))) == 0):
        raise ValueError("every output point needs at least one member")
    mx = np.maximum.reduceat(sorted_f, starts, axis=0)
    # a NaN row wins so that non-finite values propagate instead of failing here
    hit = (sorted_f == mx[sorted_a]) | np.isnan(sorted_f)
    rank = np.where(hit, np.arange(len(order))[:, None], len(order))
    first = np.minimum.reduceat(rank, starts, axis=0)
    return mx, order[first]


def point_pool(source: FeatureSet, n_out: int, seed: int | None = None) -> FeatureSet:
    """Max-pool features onto a farthest-point subset.

    Every source point belongs to the cell of its nearest retained point.
    """
    keep = fps(source.points, n_out, seed=seed)
    centers = source.points[keep]
    assign = nearest_assignment(source.points, centers)
    assign[keep] = np.arange(n_out)
    mx, _ = segment_max(source.features, assign, n_out)
    return FeatureSet(centers, mx)


# ---------------------------------------------------------------------------
# reverse-mode tape


class Node:
    __slots__ = ("value", "grad", "requires_grad", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return np.shape(self.value)

    def accumulate(self, g):
        if not self.requires_grad:
            return
        self.grad = g if self.grad is None else self.grad + g


class Tape:
    """Records operations in execution order; replaying them backwards gives gradients."""

    def __init__(self):
        self._ops: list[tuple[Node, Callable[[np.ndarray], None]]] = []
        self.params: dict[str, Node] = {}
        self.output: Node | None = None

    def param(self, name: str, value) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), True, name)
        self.params[name] = node
        return node

    def constant(self, value) -> Node:
        return Node(np.asarray(value, dtype=np.float64))

    def record(self, value, parents, backward) -> Node:
        node = Node(value, any(p.requires_grad for p in parents))
        if node.requires_grad:
            self._ops.append((node, backward))
        self.output = node
        return node

    # -- operations -------------------------------------------------------

    def conv(self, feats: Node, weights: Node, bias: Node, g: np.ndarray, scale: float,
             route: str | None = None) -> Node:
        """``scale * contract(g, feats, weights) + bias`` for a precomputed response tensor."""
        if feats.value.shape[1] != weights.value.shape[0]:
            raise DimensionMismatch("feature channels do not match weights")
        val, cache = _contract(g, feats.value, weights.value, route)
        out = scale * val + bias.value

        def backward(dout):
            df, dw = _contract_backward(g, feats.value, weights.value, cache, scale * dout,
                                        feats.requires_grad)
            weights.accumulate(dw)
            bias.accumulate(dout.sum(axis=0))
            if df is not None:
                feats.accumulate(df)

        return self.record(out, (feats, weights, bias), backward)

    def relu(self, x: Node) -> Node:
        mask = x.value > 0
        return self.record(x.value * mask, (x,), lambda d: x.accumulate(d * mask))

    def rows(self, x: Node, start: int, stop: int) -> Node:
        n = x.value.shape[0]

        def backward(d):
            full = np.zeros((n,) + d.shape[1:])
            full[start:stop] = d
            x.accumulate(full)

        return self.record(x.value[start:stop], (x,), backward)

    def concat(self, xs: list[Node]) -> Node:
        widths = np.cumsum([0] + [x.value.shape[1] for x in xs])

        def backward(d):
            for x, a, b in zip(xs, widths[:-1], widths[1:]):
                x.accumulate(d[:, a:b])

        return self.record(np.concatenate([x.value for x in xs], axis=1), xs, backward)

    def segment_max(self, x: Node, assign: np.ndarray, n_out: int) -> Node:
        mx, arg = segment_max(x.value, assign, n_out)
        cols = np.arange(mx.shape[1])

        def backward(d):
            full = np.zeros_like(x.value)
            np.add.at(full, (arg, np.broadcast_to(cols, arg.shape)), d)
            x.accumulate(full)

        return self.record(mx, (x,), backward)

    def linear(self, x: Node, w: Node, b: Node) -> Node:
        def backward(d):
            w.accumulate(x.value.T @ d)
            b.accumulate(d.sum(axis=0))
            x.accumulate(d @ w.value.T)

        return self.record(x.value @ w.value + b.value, (x, w, b), backward)

    def softmax_cross_entropy(self, logits: Node, labels: np.ndarray, weight: float = 1.0) -> tuple[Node, np.ndarray]:
        """Returns (``weight * sum of -log p_true``, probabilities)."""
        z = logits.value - logits.value.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        probs = np.exp(logp)
        idx = np.asarray(labels, dtype=np.int64)
        rows = np.arange(len(idx))
        loss = -weight * logp[rows, idx].sum()

        def backward(d):
            grad = probs.copy()
            grad[rows, idx] -= 1.0
            logits.accumulate(d * weight * grad)

        return self.record(np.asarray(loss), (logits,), backward), probs

    def add(self, xs: list[Node]) -> Node:
        def backward(d):
            for x in xs:
                x.accumulate(d)

        return self.record(sum(x.value for x in xs), xs, backward)


def backward(tape: Tape, loss_gradient: float = 1.0) -> dict[str, np.ndarray]:
    """Propagate ``loss_gradient`` from the tape's final scalar to every parameter.

    Parameters that the output does not depend on get zero gradients.
    """
    out = tape.output
    if out is None or np.ndim(out.value) != 0:
        raise TapeIncomplete("tape must end in a scalar")
    for node in tape.params.values():
        node.grad = None
    for node, _ in tape._ops:
        node.grad = None
    out.grad = np.asarray(loss_gradient, dtype=np.float64)
    for node, fn in reversed(tape._ops):
        if node.grad is not None:
            fn(node.grad)
    return {
        name: (np.zeros_like(node.value) if node.grad is None else np.asarray(node.grad))
        for name, node in tape.params.items()
    }
