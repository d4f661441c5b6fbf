"""Command-line front end: ``gen``, ``train``, ``reconstruct`` and ``eval``.

Configs are JSON files; any field can be overridden with ``--set
section.key=value`` where the value is parsed as JSON when possible.  Every
command writes one manifest JSON next to its outputs.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from contextlib import nullcontext
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from . import extract, metrics, occnet, shapegen, train
from .errors import (
    EmptyField,
    InvalidSpec,
    IoError,
    NonFiniteLoss,
    OccError,
)
from .geometry import PointCloud, load_mesh, load_xyz, save_mesh

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(OccError):
    """Bad flags or configuration."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "unknown"


# ---------------------------------------------------------------------------
# configuration helpers


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides, section: str) -> dict:
    """Apply ``section.a.b=value`` overrides that target ``section``."""
    out = json.loads(json.dumps(config))
    for item in overrides or ():
        if "=" not in item:
            raise UsageError(f"override must look like key=value: {item!r}")
        key, raw = item.split("=", 1)
        path = key.split(".")
        if path[0] != section:
            continue
        if len(path) < 2:
            raise UsageError(f"override needs a field name: {item!r}")
        node = out
        for part in path[1:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise UsageError(f"cannot descend into {part!r} in {item!r}")
        node[path[-1]] = _parse_value(raw)
    return out


def _check_sections(overrides, allowed) -> None:
    for item in overrides or ():
        head = item.split("=", 1)[0].split(".")[0]
        if head not in allowed:
            raise UsageError(f"override section {head!r} is not one of {sorted(allowed)}")


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from None


def _config(cls, data: dict, what: str):
    try:
        return cls.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise InvalidSpec(f"invalid {what} config: {exc}") from None


def _write_manifest(path: Path, command: str, args: argparse.Namespace, extra: dict, started: float) -> None:
    record = {
        "command": command,
        "arguments": {k: v for k, v in vars(args).items() if k not in ("func",)},
        "tool_version": tool_version(),
        "wall_clock_seconds": round(time.time() - started, 3),
        **extra,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + "\n")


def _ensure_dir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise IoError(f"cannot write to {path}: {exc.strerror}") from None


def parse_rotation(text: str | None) -> np.ndarray | None:
    """``"axis,degrees"`` (axis one of x, y, z) -> rotation matrix."""
    if not text:
        return None
    try:
        axis, angle = text.split(",")
        axis = axis.strip().lower()
        if axis not in ("x", "y", "z"):
            raise ValueError
        return Rotation.from_euler(axis, float(angle), degrees=True).as_matrix()
    except ValueError:
        raise UsageError(f"--rotate expects 'axis,degrees' with axis x, y or z, got {text!r}") from None


def parse_levels(text: str) -> tuple[int, ...]:
    try:
        levels = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--levels expects comma-separated integers, got {text!r}") from None
    if not levels or any(b != 2 * a for a, b in zip(levels[:-1], levels[1:])) or levels[0] < 1:
        raise UsageError("--levels must be positive and double at each step")
    return levels


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    started = time.time()
    _check_sections(args.set, {"corpus"})
    data = _load_json(args.spec)
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = _config(shapegen.CorpusConfig, apply_overrides(data, args.set, "corpus"), "corpus")
    out = Path(args.out_dir)
    _ensure_dir(out)
    corpus = shapegen.make_corpus(cfg)
    counts = {}
    for split, samples in corpus.items():
        for s in samples:
            shapegen.save_sample(s, out / split / s.shape_id)
        counts[split] = len(samples)
    cfg_dict = {k: v for k, v in vars(cfg).items() if k != "sampling"}
    cfg_dict["sampling"] = vars(cfg.sampling)
    (out / "corpus.json").write_text(json.dumps(cfg_dict, indent=2, sort_keys=True) + "\n")
    _write_manifest(out / "manifest.json", "gen", args,
                    {"seeds": {"corpus": cfg.seed}, "outputs": [str(out)], "counts": counts}, started)
    return EXIT_OK


def _network_config(args) -> occnet.NetworkConfig:
    base = (occnet.desk_config() if args.preset == "desk" else occnet.NetworkConfig()).to_dict()
    base.update(_load_json(args.net_config))
    return _config(occnet.NetworkConfig, apply_overrides(base, args.set, "net"), "network")


def cmd_train(args) -> int:
    started = time.time()
    _check_sections(args.set, {"net", "train"})
    net_cfg = _network_config(args)
    tdata = _load_json(args.train_config)
    if args.seed is not None:
        tdata["seed"] = args.seed
    train_cfg = _config(train.TrainConfig, apply_overrides(tdata, args.set, "train"), "train")
    corpus_dir = Path(args.corpus)
    try:
        samples = shapegen.load_split(corpus_dir, "train")
    except OSError as exc:
        raise IoError(f"cannot read corpus {corpus_dir}: {exc.strerror}") from None
    val = []
    if train_cfg.val_every and (corpus_dir / "val").is_dir():
        val = shapegen.load_split(corpus_dir, "val")
    corpus_seed = _load_json(corpus_dir / "corpus.json").get("seed") if (corpus_dir / "corpus.json").exists() else None
    ck_path = Path(args.out)
    _ensure_dir(ck_path.parent)
    log_path = Path(args.log) if args.log else ck_path.with_suffix(".log.jsonl")
    resume = None
    if args.resume:
        resume = train.load_checkpoint(args.resume)
        net_cfg = resume.params.config
        train_cfg = _config(train.TrainConfig,
                            apply_overrides(resume.train_config.to_dict(), args.set, "train"), "train")
    train.train(samples, net_cfg, train_cfg, val_corpus=val, log_path=log_path, checkpoint_path=ck_path,
                resume=resume, corpus_seed=corpus_seed)
    _write_manifest(ck_path.with_suffix(".manifest.json"), "train", args, {
        "seeds": {"train": train_cfg.seed, "corpus": corpus_seed},
        "network": net_cfg.to_dict(), "train_config": train_cfg.to_dict(),
        "inputs": [str(corpus_dir)], "outputs": [str(ck_path), str(log_path)],
    }, started)
    return EXIT_OK


def _read_cloud(path: Path) -> np.ndarray:
    if path.is_dir():
        path = path / "cloud.xyz"
    try:
        return load_xyz(path)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror}") from None


def _cloud_inputs(path: Path) -> list[tuple[str, Path]]:
    """(name, cloud path) pairs: one file, one sample directory, or a split directory."""
    if path.is_dir() and not (path / "cloud.xyz").exists():
        return [(p.name, p) for p in sorted(path.iterdir()) if (p / "cloud.xyz").exists()]
    return [(path.stem if path.is_file() else path.name, path)]


def cmd_reconstruct(args) -> int:
    started = time.time()
    rot = parse_rotation(args.rotate)
    opts = extract.ReconstructOptions(levels=parse_levels(args.levels), iso=args.iso)
    ck = train.load_checkpoint(args.checkpoint)
    inputs = _cloud_inputs(Path(args.cloud))
    if not inputs:
        raise IoError(f"no clouds found under {args.cloud}")
    out = Path(args.out)
    batch = len(inputs) > 1 or out.suffix == ""
    if batch:
        _ensure_dir(out)
    else:
        _ensure_dir(out.parent)
    written, failed = [], {}
    for name, path in inputs:
        pts = _read_cloud(path)
        if rot is not None:
            pts = pts @ rot.T
        target = out / f"{name}.obj" if batch else out
        try:
            mesh = extract.reconstruct(ck.params, PointCloud(pts), opts)
        except EmptyField as exc:
            if not batch:
                raise
            failed[name] = str(exc)
            continue
        save_mesh(mesh, target)
        written.append(str(target))
    manifest = (out / "manifest.json") if batch else out.with_suffix(".manifest.json")
    _write_manifest(manifest, "reconstruct", args, {
        "rotation": None if rot is None else {"spec": args.rotate, "matrix": rot.tolist()},
        "levels": list(opts.levels), "iso": opts.iso,
        "inputs": [str(args.checkpoint), str(args.cloud)], "outputs": written, "empty_field": failed,
    }, started)
    return EXIT_OK


def _load_ground_truth(path: Path, rot, grid_resolution: int):
    """(inside-testable object, surface mesh) from a mesh file, spec JSON or sample directory."""
    if path.is_dir():
        path = path / "sample.json"
    if path.suffix.lower() in (".obj", ".off"):
        mesh = load_mesh(path)
        if rot is not None:
            mesh = mesh.transformed(rotation=rot)
        return mesh, mesh
    data = _load_json(path)
    spec = shapegen.ShapeSpec.from_dict(data.get("spec", data))
    if rot is not None:
        spec = shapegen.rotate_spec(spec, rot)
    return spec, shapegen.ground_truth_mesh(spec, grid_resolution=grid_resolution)


def cmd_eval(args) -> int:
    started = time.time()
    rot = parse_rotation(args.rotate)
    pred, gt = Path(args.pred), Path(args.gt)
    if pred.is_dir():
        pairs = []
        for p in sorted(pred.glob("*.obj")):
            cand = gt / p.stem
            if not cand.exists():
                raise IoError(f"no ground truth for {p.stem} under {gt}")
            pairs.append((p.stem, p, cand))
        if not pairs:
            raise IoError(f"no .obj predictions in {pred}")
    else:
        pairs = [(pred.stem, pred, gt)]
    reports = []
    for i, (name, p, g) in enumerate(pairs):
        try:
            mesh = load_mesh(p)
        except OSError as exc:
            raise IoError(f"cannot read {p}: {exc.strerror}") from None
        inside, surface = _load_ground_truth(g, rot, args.gt_resolution)
        reports.append(metrics.evaluate_meshes(mesh, inside, args.samples, seed=args.seed,
                                               name=name, gt_mesh=surface))
    out = Path(args.out)
    _ensure_dir(out.parent)
    body = {"aggregate": metrics.aggregate(reports), "shapes": [r.to_dict() for r in reports]}
    out.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    _write_manifest(out.with_suffix(".manifest.json"), "eval", args, {
        "seeds": {"metrics": args.seed}, "inputs": [str(pred), str(gt)], "outputs": [str(out)],
        "rotation": None if rot is None else {"spec": args.rotate, "matrix": rot.tolist()},
    }, started)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="occpcnn", description="Occupancy reconstruction from point clouds.")
    parser.add_argument("--threads", type=int, default=None, help="cap on BLAS threads")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a procedural training corpus")
    g.add_argument("out_dir")
    g.add_argument("--spec", help="corpus config JSON")
    g.add_argument("--seed", type=int)
    g.add_argument("--set", action="append", metavar="corpus.KEY=VALUE")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a network on a corpus")
    t.add_argument("corpus")
    t.add_argument("out", help="checkpoint path")
    t.add_argument("--net-config")
    t.add_argument("--train-config")
    t.add_argument("--preset", choices=("desk", "full"), default="desk")
    t.add_argument("--seed", type=int)
    t.add_argument("--log", help="JSON-lines log path (default: next to the checkpoint)")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--set", action="append", metavar="{net,train}.KEY=VALUE")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("reconstruct", help="mesh a cloud (file, sample or split directory)")
    r.add_argument("checkpoint")
    r.add_argument("cloud")
    r.add_argument("out", help="OBJ path, or directory for several clouds")
    r.add_argument("--levels", default="64,128,256")
    r.add_argument("--iso", type=float, default=0.5)
    r.add_argument("--rotate", help="rotate the cloud first, e.g. 'z,30'")
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="compare predicted meshes with ground truth")
    e.add_argument("pred", help="OBJ file or directory of OBJ files")
    e.add_argument("gt", help="mesh, spec JSON, sample directory, or split directory")
    e.add_argument("out", help="report JSON path")
    e.add_argument("--samples", type=int, default=metrics.DEFAULT_SAMPLES)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--gt-resolution", type=int, default=128, help="grid for composite ground-truth meshes")
    e.add_argument("--rotate", help="rotate the ground truth, e.g. 'z,30'")
    e.set_defaults(func=cmd_eval)
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, (UsageError, InvalidSpec)):
        return EXIT_USAGE
    if isinstance(exc, (NonFiniteLoss, EmptyField, FloatingPointError)):
        return EXIT_NUMERIC
    # parse, I/O, geometry and shape errors are all problems with the data
    return EXIT_DATA


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be at least 1")
        if args.threads is not None:
            from threadpoolctl import threadpool_limits
            ctx = threadpool_limits(limits=args.threads)
        else:
            ctx = nullcontext()
        with ctx:
            return args.func(args)
    except (OccError, OSError) as exc:
        print(f"occpcnn: error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
