"""Minibatch training of the occupancy network.

Every source of randomness is derived from ``(seed, step)`` or
``(seed, epoch)``, so a run resumed from a checkpoint continues exactly as
the uninterrupted run would have.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import occnet
from .errors import CheckpointError, InvalidSpec, NonFiniteLoss
from .occnet import NetworkConfig, NetworkParams
from .pcnn import LayerParams, Tape, backward

CHECKPOINT_MAGIC = b"OCRN"
CHECKPOINT_VERSION = 1

# stream tags for derived generators
_SHUFFLE, _QUERIES, _VALIDATION = 1, 2, 3


@dataclass
class TrainConfig:
    """Optimisation settings.

    ``max_steps`` overrides ``epochs`` when set.  ``val_every`` and
    ``checkpoint_every`` count optimiser steps; 0 disables them.  With
    ``log_wall_time`` off, logs of two identical runs are byte-identical.
    """

    batch_size: int = 8
    queries_per_cloud: int = 512
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 1
    max_steps: int | None = None
    seed: int = 0
    val_every: int = 0
    val_queries: int = 2048
    checkpoint_every: int = 0
    cosine_decay: bool = False
    log_wall_time: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.queries_per_cloud < 1:
            raise InvalidSpec("batch_size and queries_per_cloud must be at least 1")
        if self.learning_rate < 0:
            raise InvalidSpec("learning_rate must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise InvalidSpec("invalid Adam hyperparameters")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        extra = set(d) - names
        if extra:
            raise InvalidSpec(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)


def init_params(config: NetworkConfig, seed: int = 0) -> NetworkParams:
    """Gaussian kernels with sd ``1/sqrt(27 * fan_in)``, classifier sd ``1/sqrt(fan_in)``, zero biases."""
    rng = np.random.default_rng(seed)
    blocks = []
    for b in range(config.n_blocks):
        j, k = config.in_channels(b), config.depths[b]
        w = rng.normal(0.0, 1.0 / math.sqrt(27 * j), size=(j, k, 27))
        blocks.append(LayerParams(w, np.zeros(k), config.sigma2(b)))
    widths = [config.feature_width, *config.hidden, 2]
    fc = [(rng.normal(0.0, 1.0 / math.sqrt(a), size=(a, c)), np.zeros(c))
          for a, c in zip(widths[:-1], widths[1:])]
    return NetworkParams(config, blocks, fc)


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "AdamState":
        arrays = params.named_arrays()
        return cls({k: np.zeros_like(a) for k, a in arrays.items()},
                   {k: np.zeros_like(a) for k, a in arrays.items()})


def adam_update(params: NetworkParams, grads: dict[str, np.ndarray], state: AdamState,
                lr: float, cfg: TrainConfig) -> None:
    """In-place Adam step with bias correction."""
    state.t += 1
    c1 = 1.0 - cfg.beta1 ** state.t
    c2 = 1.0 - cfg.beta2 ** state.t
    for name, p in params.named_arrays().items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


def learning_rate(cfg: TrainConfig, step: int, total: int) -> float:
    if not cfg.cosine_decay or total <= 0:
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / total))


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: NetworkParams
    optimizer: AdamState
    step: int
    epoch: int
    train_config: TrainConfig
    corpus_seed: int | None = None

    @property
    def config_hash(self) -> str:
        return self.params.config.digest()


def save_checkpoint(ck: Checkpoint, path) -> None:
    """``OCRN``, version, JSON header, then length-prefixed float64 arrays.

    Arrays follow declaration order: parameters, Adam first moments, Adam
    second moments.
    """
    arrays = ck.params.named_arrays()
    names = list(arrays)
    header = {
        "network": ck.params.config.to_dict(),
        "train": ck.train_config.to_dict(),
        "config_hash": ck.config_hash,
        "corpus_seed": ck.corpus_seed,
        "step": ck.step,
        "epoch": ck.epoch,
        "adam_t": ck.optimizer.t,
        "arrays": [[n, list(arrays[n].shape)] for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob]
    for group in (arrays, ck.optimizer.m, ck.optimizer.v):
        for n in names:
            a = np.ascontiguousarray(group[n], dtype="<f8").ravel()
            parts.append(struct.pack("<Q", a.size))
            parts.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("magic", "file does not start with OCRN")
    if len(data) < 12:
        raise CheckpointError("version", "file ends inside the preamble")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError("version", f"unsupported version {version}")
    try:
        header = json.loads(data[12:12 + hlen].decode("utf-8"))
        net_cfg = NetworkConfig.from_dict(header["network"])
        train_cfg = TrainConfig.from_dict(header["train"])
        specs = [(n, tuple(s)) for n, s in header["arrays"]]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError, InvalidSpec) as exc:
        raise CheckpointError("header", str(exc)) from None
    if header.get("config_hash") != net_cfg.digest():
        raise CheckpointError("header", "config hash does not match the network config")
    pos = 12 + hlen
    groups = []
    for label in ("params", "adam_m", "adam_v"):
        group = {}
        for name, shape in specs:
            section = f"{label}/{name}"
            if pos + 8 > len(data):
                raise CheckpointError(section, "truncated length prefix")
            (count,) = struct.unpack("<Q", data[pos:pos + 8])
            pos += 8
            if count != int(np.prod(shape)) or pos + 8 * count > len(data):
                raise CheckpointError(section, "length does not match the header or file is truncated")
            group[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
            pos += 8 * count
        groups.append(group)
    if pos != len(data):
        raise CheckpointError("trailer", f"{len(data) - pos} unexpected trailing bytes")
    try:
        params = NetworkParams.from_arrays(net_cfg, groups[0])
    except (KeyError, ValueError) as exc:
        raise CheckpointError("params", str(exc)) from None
    opt = AdamState(groups[1], groups[2], int(header["adam_t"]))
    return Checkpoint(params, opt, int(header["step"]), int(header["epoch"]), train_cfg,
                      header.get("corpus_seed"))


# ---------------------------------------------------------------------------
# training


def _sample_loss_and_grads(params: NetworkParams, structure, queries, labels, weight: float):
    tape = Tape()
    logits = occnet.build_logits(tape, params, structure, queries)
    node, _ = tape.softmax_cross_entropy(logits, labels.astype(np.int64), weight)
    return float(node.value), backward(tape)


def _subsample(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if n <= k:
        return np.arange(n)
    return np.sort(rng.choice(n, size=k, replace=False))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def _read_log(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    keep = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        if rec["step"] <= upto:
            keep.append(rec)
    return keep


def train(corpus: Sequence, net_cfg: NetworkConfig, train_cfg: TrainConfig,
          val_corpus: Sequence | None = None, log_path=None, checkpoint_path=None,
          resume: Checkpoint | None = None, init_seed: int | None = None,
          corpus_seed: int | None = None,
          callback: Callable[[dict], None] | None = None) -> tuple[NetworkParams, list[dict]]:
    """Minimise the mean query cross-entropy over ``corpus``.

    Each step takes ``batch_size`` clouds from a per-epoch shuffle and
    ``queries_per_cloud`` of each cloud's stored queries.  The per-cloud
    gradients are summed in batch order, so results do not depend on
    scheduling.  Returns the final parameters and the log records.
    """
    if len(corpus) == 0:
        raise InvalidSpec("training corpus is empty")
    for s in corpus:
        if len(s.cloud.points) != net_cfg.input_size:
            raise InvalidSpec(f"sample {s.shape_id} has {len(s.cloud.points)} points, "
                              f"network expects {net_cfg.input_size}")
    n = len(corpus)
    spe = steps_per_epoch(n, train_cfg.batch_size)
    total = train_cfg.max_steps if train_cfg.max_steps is not None else train_cfg.epochs * spe
    if resume is not None:
        if resume.params.config != net_cfg:
            raise InvalidSpec("checkpoint network config differs from the requested one")
        params = resume.params.copy()
        opt = AdamState({k: v.copy() for k, v in resume.optimizer.m.items()},
                        {k: v.copy() for k, v in resume.optimizer.v.items()}, resume.optimizer.t)
        step = resume.step
    else:
        params = init_params(net_cfg, train_cfg.seed if init_seed is None else init_seed)
        opt = AdamState.zeros_like(params)
        step = 0

    log_file = Path(log_path) if log_path is not None else None
    records = _read_log(log_file, step) if (log_file is not None and resume is not None) else []
    if log_file is not None:
        log_file.write_text("".join(json.dumps(r) + "\n" for r in records))

    def emit(rec: dict) -> None:
        records.append(rec)
        if log_file is not None:
            with log_file.open("a") as fh:
                fh.write(json.dumps(rec) + "\n")
        if callback is not None:
            callback(rec)

    def checkpoint(path) -> None:
        save_checkpoint(Checkpoint(params, opt, step, step // spe, train_cfg, corpus_seed), path)

    structures: dict[int, occnet.CloudStructure] = {}
    start = time.perf_counter()
    order = None
    order_epoch = -1
    while step < total:
        epoch, pos = divmod(step, spe)
        if epoch != order_epoch:
            order = np.random.default_rng([train_cfg.seed, _SHUFFLE, epoch]).permutation(n)
            order_epoch = epoch
        batch = order[pos * train_cfg.batch_size:(pos + 1) * train_cfg.batch_size]
        lr = learning_rate(train_cfg, step, total)
        grads = {k: np.zeros_like(a) for k, a in params.named_arrays().items()}
        batch_loss = 0.0
        for slot, idx in enumerate(batch):
            sample = corpus[idx]
            if idx not in structures:
                structures[idx] = occnet.cloud_structure(net_cfg, sample.cloud.points)
            rng = np.random.default_rng([train_cfg.seed, _QUERIES, step, slot])
            pick = _subsample(len(sample.queries), train_cfg.queries_per_cloud, rng)
            weight = 1.0 / (len(batch) * len(pick))
            value, g = _sample_loss_and_grads(params, structures[idx], sample.queries[pick],
                                              sample.labels[pick], weight)
            batch_loss += value
            for k in grads:
                grads[k] += g[k]
        finite = math.isfinite(batch_loss) and all(np.all(np.isfinite(g)) for g in grads.values())
        if not finite:
            if checkpoint_path is not None:
                checkpoint(str(checkpoint_path) + ".nonfinite")
            raise NonFiniteLoss(f"non-finite loss or gradient at step {step + 1} (loss {batch_loss})")
        adam_update(params, grads, opt, lr, train_cfg)
        step += 1
        rec = {"step": step, "loss": batch_loss, "lr": lr}
        if train_cfg.log_wall_time:
            rec["wall_time"] = round(time.perf_counter() - start, 6)
        emit(rec)
        if val_corpus and train_cfg.val_every and step % train_cfg.val_every == 0:
            vl, va = evaluate_classifier(params, val_corpus, train_cfg.val_queries, train_cfg.seed)
            emit({"step": step, "val_loss": vl, "val_accuracy": va})
        if checkpoint_path is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            checkpoint(checkpoint_path)
    if checkpoint_path is not None:
        checkpoint(checkpoint_path)
    return params, records


# ---------------------------------------------------------------------------
# evaluation


def evaluate_classifier(params: NetworkParams, corpus: Sequence, max_queries: int | None = None,
                        seed: int = 0, threshold: float = 0.5) -> tuple[float, float]:
    """Mean per-cloud cross-entropy and overall query accuracy.

    With ``max_queries`` set, each cloud uses a fixed random subset of its
    queries drawn from ``seed``.
    """
    if len(corpus) == 0:
        raise InvalidSpec("evaluation corpus is empty")
    losses = []
    correct = 0
    count = 0
    for i, sample in enumerate(corpus):
        q, y = sample.queries, sample.labels
        if max_queries is not None:
            pick = _subsample(len(q), max_queries, np.random.default_rng([seed, _VALIDATION, i]))
            q, y = q[pick], y[pick]
        probs = occnet.forward(params, sample.cloud, q)
        losses.append(occnet.loss(probs, y))
        correct += int(np.sum(occnet.classify(probs, threshold) == y))
        count += len(y)
    return float(np.mean(losses)), correct / count


def majority_baseline(corpus: Sequence) -> float:
    """Accuracy of always predicting the more frequent label of the corpus."""
    labels = np.concatenate([np.asarray(s.labels, dtype=bool) for s in corpus])
    frac = labels.mean()
    return float(max(frac, 1.0 - frac))
