"""U-shaped point-convolution occupancy network with dual restriction.

Each block convolves the features of its source point set and restricts the
result twice with the same kernels: once at the block's own point set (the
point path, which continues through the U) and once at the query points (the
query path).  The query-path outputs of all blocks are concatenated and fed to
a small ReLU classifier ending in a two-way softmax.  Column 1 of the output
is the probability of being inside.

Point-set structure for a cloud ``S_0`` with ``s`` shrinking blocks::

    shrinking b < s : S_b --conv--> S_b --relu, max-pool--> S_{b+1}
    bottleneck      : S_s --conv--> S_s --relu
    enlarging e     : S_{s-e} --conv--> S_{s-1-e} --relu, concat skip

The skip for enlarging block ``e`` is the shrinking output living on the same
point set.  The last enlarging block only feeds the query path.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, InvalidSpec
from .pcnn import (
    LayerParams,
    Tape,
    fps,
    gaussian_tensor,
    nearest_assignment,
    segment_max,
    _contract,
)

DEFAULT_BLOCKS = ((256, 64), (128, 128), (16, 256), (16, 256), (128, 256), (256, 128), (300, 64))


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture sizes.

    Parameters
    ----------
    input_size : int
        Number of points in every input cloud.
    blocks : sequence of (output_points, depth)
        One pair per block: shrinking blocks, the bottleneck, then enlarging
        blocks.  Enlarging point counts must mirror the shrinking ones.
    hidden : sequence of int
        Hidden widths of the ReLU classifier.
    width : float
        Kernel width constant ``c``; a block whose source has ``I`` points
        uses ``sigma2 = c / I``.
    gain : float
        Fixed factor applied to every block's convolution in place of the
        analytic constant.  Because ``sigma2`` scales with ``1 / I`` the
        Gaussian mass a target sees is roughly layer independent (about 2 on
        unit-size surfaces), so 0.5 keeps activations O(1) through the U.
    """

    input_size: int = 300
    blocks: tuple = DEFAULT_BLOCKS
    hidden: tuple = (128, 128)
    width: float = 1.0
    gain: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple((int(p), int(d)) for p, d in self.blocks))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        self.validate()

    def validate(self) -> None:
        n = len(self.blocks)
        if n < 3 or n % 2 == 0:
            raise InvalidSpec("block count must be odd and at least 3")
        if self.input_size < 1 or self.width <= 0 or self.gain <= 0:
            raise InvalidSpec("input_size, width and gain must be positive")
        if any(p < 1 or d < 1 for p, d in self.blocks) or any(h < 1 for h in self.hidden):
            raise InvalidSpec("point counts, depths and hidden widths must be positive")
        sizes = self.set_sizes
        if any(b >= a for a, b in zip(sizes[:-1], sizes[1:])):
            raise InvalidSpec(f"shrinking point counts must decrease from {self.input_size}: {sizes}")
        s = self.n_shrink
        if self.blocks[s][0] != sizes[s]:
            raise InvalidSpec("bottleneck point count must equal the last shrinking count")
        for e in range(s):
            if self.blocks[s + 1 + e][0] != sizes[s - 1 - e]:
                raise InvalidSpec("enlarging point counts must mirror the shrinking stream")

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def n_shrink(self) -> int:
        return (len(self.blocks) - 1) // 2

    @property
    def set_sizes(self) -> list[int]:
        """Sizes of the nested point sets S_0 ⊃ S_1 ⊃ ... ⊃ S_s."""
        return [self.input_size] + [p for p, _ in self.blocks[:self.n_shrink]]

    @property
    def depths(self) -> list[int]:
        return [d for _, d in self.blocks]

    def source_set(self, b: int) -> int:
        s = self.n_shrink
        return b if b <= s else 2 * s + 1 - b

    def target_set(self, b: int) -> int:
        s = self.n_shrink
        return b if b <= s else 2 * s - b

    def skip_block(self, b: int) -> int | None:
        """Shrinking block whose output is concatenated to block ``b``'s output."""
        s = self.n_shrink
        if b <= s or b == self.n_blocks - 1:
            return None
        return 2 * s - b - 1

    def in_channels(self, b: int) -> int:
        if b == 0:
            return 1
        prev = self.depths[b - 1]
        skip = self.skip_block(b - 1)
        return prev + (self.depths[skip] if skip is not None else 0)

    def sigma2(self, b: int) -> float:
        return self.width / self.set_sizes[self.source_set(b)]

    @property
    def feature_width(self) -> int:
        return sum(self.depths)

    def with_input_size(self, n: int) -> "NetworkConfig":
        """Same layout for a denser or sparser input; only S_0 changes."""
        blocks = list(self.blocks)
        blocks[-1] = (n, blocks[-1][1])
        return NetworkConfig(n, tuple(blocks), self.hidden, self.width, self.gain)

    def to_dict(self) -> dict:
        return {"input_size": self.input_size, "blocks": [list(b) for b in self.blocks],
                "hidden": list(self.hidden), "width": self.width, "gain": self.gain}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {"input_size", "blocks", "hidden", "width", "gain"}
        extra = set(d) - known
        if extra:
            raise InvalidSpec(f"unknown network config keys: {sorted(extra)}")
        kw = dict(d)
        if "blocks" in kw:
            kw["blocks"] = tuple(tuple(b) for b in kw["blocks"])
        if "hidden" in kw:
            kw["hidden"] = tuple(kw["hidden"])
        return cls(**kw)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def desk_config(input_size: int = 300) -> NetworkConfig:
    """Narrow layout sized for CPU training in minutes rather than days."""
    blocks = ((256, 16), (128, 32), (16, 32), (16, 32), (128, 32), (256, 32), (input_size, 16))
    return NetworkConfig(input_size, blocks, (64, 64))


@dataclass
class NetworkParams:
    config: NetworkConfig
    blocks: list[LayerParams]
    fc: list[tuple[np.ndarray, np.ndarray]]  # (weight (in, out), bias (out,))

    def __post_init__(self):
        cfg = self.config
        if len(self.blocks) != cfg.n_blocks:
            raise DimensionMismatch(f"expected {cfg.n_blocks} blocks, got {len(self.blocks)}")
        for b, layer in enumerate(self.blocks):
            if layer.channels != (cfg.in_channels(b), cfg.depths[b]):
                raise DimensionMismatch(f"block {b} has channels {layer.channels}")
        widths = [cfg.feature_width, *cfg.hidden, 2]
        if len(self.fc) != len(widths) - 1:
            raise DimensionMismatch("classifier layer count does not match config")
        for (w, bias), a, b in zip(self.fc, widths[:-1], widths[1:]):
            if w.shape != (a, b) or bias.shape != (b,):
                raise DimensionMismatch("classifier layer shape does not match config")

    def named_arrays(self) -> dict[str, np.ndarray]:
        """All trainable arrays in declaration order."""
        out = {}
        for b, layer in enumerate(self.blocks):
            out[f"block{b}.weights"] = layer.weights
            out[f"block{b}.bias"] = layer.bias
        for i, (w, bias) in enumerate(self.fc):
            out[f"fc{i}.weight"] = w
            out[f"fc{i}.bias"] = bias
        return out

    @classmethod
    def from_arrays(cls, config: NetworkConfig, arrays: dict[str, np.ndarray]) -> "NetworkParams":
        blocks = [LayerParams(np.array(arrays[f"block{b}.weights"]), np.array(arrays[f"block{b}.bias"]),
                              config.sigma2(b)) for b in range(config.n_blocks)]
        fc = [(np.array(arrays[f"fc{i}.weight"]), np.array(arrays[f"fc{i}.bias"]))
              for i in range(len(config.hidden) + 1)]
        return cls(config, blocks, fc)

    def copy(self) -> "NetworkParams":
        return NetworkParams.from_arrays(self.config, self.named_arrays())


@dataclass
class QueryBatch:
    queries: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.queries = np.asarray(self.queries, dtype=np.float64).reshape(-1, 3)
        if len(self.queries) == 0:
            raise DimensionMismatch("query batch must not be empty")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=bool).ravel()
            if len(self.labels) != len(self.queries):
                raise DimensionMismatch("one label per query required")


@dataclass
class CloudStructure:
    """Nested farthest-point subsets and pooling assignments of one cloud."""

    points: np.ndarray
    sets: list[np.ndarray]  # point coordinates of S_0 .. S_s
    assign: list[np.ndarray] = field(default_factory=list)  # S_b -> S_{b+1} cell index


def cloud_structure(config: NetworkConfig, points) -> CloudStructure:
    p = _as_points(points)
    if len(p) != config.input_size:
        raise DimensionMismatch(f"cloud has {len(p)} points, network expects {config.input_size}")
    sets = [p]
    assign = []
    for n in config.set_sizes[1:]:
        cur = sets[-1]
        keep = fps(cur, n)
        a = nearest_assignment(cur, cur[keep])
        a[keep] = np.arange(n)
        sets.append(cur[keep])
        assign.append(a)
    return CloudStructure(p, sets, assign)


def _as_points(x) -> np.ndarray:
    pts = getattr(x, "points", x)
    if isinstance(x, QueryBatch):
        pts = x.queries
    return np.asarray(pts, dtype=np.float64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# differentiable forward on a tape


def build_logits(tape: Tape, params: NetworkParams, structure: CloudStructure,
                 queries: np.ndarray) -> object:
    """Record the full network on ``tape`` and return the logits node (L x 2)."""
    cfg = params.config
    nodes = {name: tape.param(name, a) for name, a in params.named_arrays().items()}
    n_q = len(queries)
    feats = tape.constant(np.ones((cfg.input_size, 1)))
    shrink_out = []
    query_outs = []
    for b in range(cfg.n_blocks):
        layer = params.blocks[b]
        src = structure.sets[cfg.source_set(b)]
        last = b == cfg.n_blocks - 1
        tgt = queries if last else np.concatenate([structure.sets[cfg.target_set(b)], queries])
        g = gaussian_tensor(tgt, src, layer.sigma2, layer.spacing)
        out = tape.conv(feats, nodes[f"block{b}.weights"], nodes[f"block{b}.bias"], g, cfg.gain)
        n_p = len(tgt) - n_q
        query_outs.append(out if last else tape.rows(out, n_p, n_p + n_q))
        if last:
            break
        pts = tape.relu(tape.rows(out, 0, n_p))
        if b < cfg.n_shrink:
            pts = tape.segment_max(pts, structure.assign[b], cfg.set_sizes[b + 1])
            shrink_out.append(pts)
        skip = cfg.skip_block(b)
        if skip is not None:
            pts = tape.concat([pts, shrink_out[skip]])
        feats = pts
    h = tape.concat(query_outs)
    for i in range(len(params.fc)):
        h = tape.linear(h, nodes[f"fc{i}.weight"], nodes[f"fc{i}.bias"])
        if i < len(params.fc) - 1:
            h = tape.relu(h)
    return h


# ---------------------------------------------------------------------------
# inference


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class FieldEvaluator:
    """Occupancy field of one cloud: the point path is computed once, queries in chunks."""

    def __init__(self, params: NetworkParams, cloud, chunk: int = 1024):
        self.params = params
        self.chunk = int(chunk)
        cfg = params.config
        self.structure = cloud_structure(cfg, cloud)
        self.sources: list[tuple[np.ndarray, np.ndarray]] = []
        feats = np.ones((cfg.input_size, 1))
        shrink_out = []
        for b in range(cfg.n_blocks):
            layer = params.blocks[b]
            src = self.structure.sets[cfg.source_set(b)]
            self.sources.append((src, feats))
            if b == cfg.n_blocks - 1:
                break
            tgt = self.structure.sets[cfg.target_set(b)]
            out = _apply(layer, src, feats, tgt, cfg.gain)
            pts = np.maximum(out, 0.0)
            if b < cfg.n_shrink:
                pts, _ = segment_max(pts, self.structure.assign[b], cfg.set_sizes[b + 1])
                shrink_out.append(pts)
            skip = cfg.skip_block(b)
            if skip is not None:
                pts = np.concatenate([pts, shrink_out[skip]], axis=1)
            feats = pts

    def query_features(self, queries: np.ndarray) -> np.ndarray:
        gain = self.params.config.gain
        cols = [_apply(layer, src, feats, queries, gain)
                for layer, (src, feats) in zip(self.params.blocks, self.sources)]
        return np.concatenate(cols, axis=1)

    def logits(self, queries) -> np.ndarray:
        q = _as_points(queries)
        if len(q) == 0:
            raise DimensionMismatch("query batch must not be empty")
        out = np.empty((len(q), 2))
        for s in range(0, len(q), self.chunk):
            h = self.query_features(q[s:s + self.chunk])
            for i, (w, bias) in enumerate(self.params.fc):
                h = h @ w + bias
                if i < len(self.params.fc) - 1:
                    h = np.maximum(h, 0.0)
            out[s:s + self.chunk] = h
        return out

    def probabilities(self, queries) -> np.ndarray:
        return _softmax(self.logits(queries))

    def __call__(self, queries) -> np.ndarray:
        """Interior probability per query."""
        return self.probabilities(queries)[:, 1]


def _apply(layer: LayerParams, src: np.ndarray, feats: np.ndarray, tgt: np.ndarray,
           gain: float) -> np.ndarray:
    g = gaussian_tensor(tgt, src, layer.sigma2, layer.spacing)
    val, _ = _contract(g, feats, layer.weights)
    return gain * val + layer.bias


def forward(params: NetworkParams, cloud, queries) -> np.ndarray:
    """Per-query class probabilities, shape L x 2; column 1 is P(inside)."""
    q = _as_points(queries)
    if len(q) == 0:
        raise DimensionMismatch("query batch must not be empty")
    return FieldEvaluator(params, cloud).probabilities(q)


def loss(probs, labels) -> float:
    """Mean negative log-likelihood of the true class."""
    p = np.asarray(probs, dtype=np.float64)
    y = np.asarray(labels, dtype=bool).ravel()
    if p.ndim != 2 or p.shape[1] != 2 or len(p) != len(y):
        raise DimensionMismatch("probabilities must be L x 2 with one label per row")
    if len(y) == 0:
        raise DimensionMismatch("empty batch")
    p_true = p[np.arange(len(y)), y.astype(np.int64)]
    return float(-np.mean(np.log(np.maximum(p_true, np.finfo(float).tiny))))


def classify(probs, threshold: float = 0.5) -> np.ndarray:
    """Inside where P(inside) >= threshold; an exact tie counts as inside."""
    p = np.asarray(probs, dtype=np.float64)
    return p[:, 1] >= threshold


def predict_occupancy(params: NetworkParams, cloud, queries, threshold: float = 0.5) -> np.ndarray:
    return classify(forward(params, cloud, queries), threshold)
