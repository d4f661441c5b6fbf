import json

import numpy as np
import pytest

from conftest import tiny_network_config
from occpcnn import shapegen
from occpcnn.cli import UsageError, apply_overrides, main, parse_levels, parse_rotation
from occpcnn.geometry import load_mesh, save_xyz
from occpcnn.train import AdamState, Checkpoint, TrainConfig, init_params, load_checkpoint, save_checkpoint

TINY_CORPUS = [
    "--set", "corpus.n_train=3", "--set", "corpus.n_val=2", "--set", "corpus.n_test=2",
    "--set", "corpus.sampling.input_size=24", "--set", "corpus.sampling.pool_size=128",
    "--set", "corpus.sampling.near_queries=48", "--set", "corpus.sampling.far_queries=16",
]
TINY_TRAIN = ["--set", "train.max_steps=3", "--set", "train.batch_size=2", "--set", "train.queries_per_cloud=16",
              "--set", "train.log_wall_time=false"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen", str(root / "corpus"), "--seed", "5", *TINY_CORPUS]) == 0
    net = root / "net.json"
    net.write_text(json.dumps(tiny_network_config().to_dict()))
    return root, net


def trained(workspace, name="model.ocrn", *extra):
    root, net = workspace
    ck = root / name
    assert main(["train", str(root / "corpus"), str(ck), "--net-config", str(net), *TINY_TRAIN, *extra]) == 0
    return ck


def constant_checkpoint(path, inside_logit):
    params = init_params(tiny_network_config(), 0)
    w, _ = params.fc[-1]
    w[...] = 0.0
    params.fc[-1] = (w, np.array([0.0, inside_logit]))
    save_checkpoint(Checkpoint(params, AdamState.zeros_like(params), 0, 0, TrainConfig()), path)
    return path


def test_gen_layout(workspace):
    root, _ = workspace
    corpus = root / "corpus"
    for split, n in (("train", 3), ("val", 2), ("test", 2)):
        samples = shapegen.load_split(corpus, split)
        assert len(samples) == n
        assert all(len(s.cloud.points) == 24 and len(s.queries) == 64 for s in samples)
    cfg = json.loads((corpus / "corpus.json").read_text())
    assert cfg["seed"] == 5 and cfg["sampling"]["input_size"] == 24
    manifest = json.loads((corpus / "manifest.json").read_text())
    assert manifest["command"] == "gen" and manifest["seeds"] == {"corpus": 5}
    assert manifest["counts"] == {"train": 3, "val": 2, "test": 2}
    assert "tool_version" in manifest and "wall_clock_seconds" in manifest


def test_gen_is_byte_identical(workspace, tmp_path):
    root, _ = workspace
    assert main(["gen", str(tmp_path / "again"), "--seed", "5", *TINY_CORPUS]) == 0
    for f in sorted((root / "corpus").rglob("*")):
        if f.is_file() and f.name != "manifest.json":
            assert f.read_bytes() == (tmp_path / "again" / f.relative_to(root / "corpus")).read_bytes()


def test_gen_spec_file(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_train": 1, "n_val": 1, "n_test": 1,
                                "sampling": {"input_size": 10, "pool_size": 20, "near_queries": 4, "far_queries": 4}}))
    assert main(["gen", str(tmp_path / "c"), "--spec", str(spec)]) == 0
    assert len(shapegen.load_split(tmp_path / "c", "test")) == 1


def test_train_writes_checkpoint_log_manifest(workspace):
    ck = trained(workspace)
    loaded = load_checkpoint(ck)
    assert loaded.step == 3 and loaded.corpus_seed == 5
    assert loaded.params.config == tiny_network_config()
    log = [json.loads(x) for x in ck.with_suffix(".log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == [1, 2, 3]
    manifest = json.loads(ck.with_suffix(".manifest.json").read_text())
    assert manifest["command"] == "train"
    assert manifest["seeds"] == {"train": 0, "corpus": 5}


def test_train_is_reproducible(workspace):
    a = trained(workspace, "a.ocrn")
    b = trained(workspace, "b.ocrn")
    assert a.read_bytes() == b.read_bytes()
    assert a.with_suffix(".log.jsonl").read_bytes() == b.with_suffix(".log.jsonl").read_bytes()
    c = trained(workspace, "c.ocrn", "--seed", "1")
    assert c.read_bytes() != a.read_bytes()


def test_train_resume_continues_identically(workspace):
    root, net = workspace
    full = trained(workspace, "full.ocrn", "--set", "train.max_steps=5")
    part = trained(workspace, "part.ocrn", "--set", "train.max_steps=2")
    assert main(["train", str(root / "corpus"), str(part), "--resume", str(part), *TINY_TRAIN,
                 "--set", "train.max_steps=5"]) == 0
    assert part.read_bytes() == full.read_bytes()
    assert part.with_suffix(".log.jsonl").read_bytes() == full.with_suffix(".log.jsonl").read_bytes()


def test_train_overfits_two_shapes(tmp_path):
    assert main(["gen", str(tmp_path / "c"), "--seed", "1", "--set", "corpus.n_train=2", "--set", "corpus.n_val=1",
                 "--set", "corpus.n_test=1", "--set", "corpus.max_parts=1", *TINY_CORPUS[6:]]) == 0
    net = tmp_path / "net.json"
    net.write_text(json.dumps({"input_size": 24, "blocks": [[12, 8], [4, 16], [4, 16], [12, 16], [24, 8]],
                               "hidden": [32, 32]}))
    ck = tmp_path / "m.ocrn"
    assert main(["train", str(tmp_path / "c"), str(ck), "--net-config", str(net),
                 "--set", "train.max_steps=200", "--set", "train.batch_size=2", "--set", "train.queries_per_cloud=64",
                 "--set", "train.learning_rate=0.01"]) == 0
    losses = [json.loads(x)["loss"] for x in ck.with_suffix(".log.jsonl").read_text().splitlines()]
    assert min(losses) < 0.1 * losses[0]


def test_corrupted_checkpoint_reports_section(workspace, tmp_path, capsys):
    ck = trained(workspace, "x.ocrn")
    bad = tmp_path / "bad.ocrn"
    bad.write_bytes(ck.read_bytes()[:-5])
    root, _ = workspace
    code = main(["reconstruct", str(bad), str(root / "corpus" / "test"), str(tmp_path / "out")])
    assert code == 2
    assert "adam_v/fc1.bias" in capsys.readouterr().err


def test_reconstruct_and_eval_batch(workspace, tmp_path):
    root, _ = workspace
    ck = constant_checkpoint(tmp_path / "inside.ocrn", 3.0)  # a filled box around each cloud
    out = tmp_path / "meshes"
    assert main(["reconstruct", str(ck), str(root / "corpus" / "test"), str(out), "--levels", "4,8"]) == 0
    objs = sorted(out.glob("*.obj"))
    assert [p.stem for p in objs] == ["test_0000", "test_0001"]
    assert all(load_mesh(p).watertight for p in objs)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["levels"] == [4, 8] and manifest["empty_field"] == {}

    report = tmp_path / "report.json"
    assert main(["eval", str(out), str(root / "corpus" / "test"), str(report), "--samples", "2000",
                 "--gt-resolution", "32"]) == 0
    body = json.loads(report.read_text())
    assert body["aggregate"]["count"] == 2
    assert [r["name"] for r in body["shapes"]] == ["test_0000", "test_0001"]
    assert body["aggregate"]["iou"] == pytest.approx(np.mean([r["iou"] for r in body["shapes"]]))
    assert 0.0 < body["aggregate"]["iou"] < 1.0
    assert json.loads(report.with_suffix(".manifest.json").read_text())["command"] == "eval"


def test_reconstruct_single_cloud_with_rotation(workspace, tmp_path):
    ck = constant_checkpoint(tmp_path / "inside.ocrn", 3.0)
    r = np.random.default_rng(0)
    cloud = r.normal(size=(24, 3)) * [0.3, 0.1, 0.05]
    path = tmp_path / "cloud.xyz"
    save_xyz(cloud, path)
    out = tmp_path / "m.obj"
    assert main(["reconstruct", str(ck), str(path), str(out), "--levels", "4,8", "--rotate", "z,90"]) == 0
    mesh = load_mesh(out)
    ext = mesh.bounds().extent
    assert ext[1] > ext[0]  # the long x axis now points along y
    manifest = json.loads(out.with_suffix(".manifest.json").read_text())
    assert manifest["rotation"]["spec"] == "z,90"
    np.testing.assert_allclose(manifest["rotation"]["matrix"], [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)


def test_eval_identical_and_disjoint(tmp_path):
    cube = shapegen.make_primitive(shapegen.box((1.0, 1.0, 1.0)))
    far = cube.transformed(translation=(3.0, 0.0, 0.0))
    from occpcnn.geometry import save_mesh

    save_mesh(cube, tmp_path / "a.obj")
    save_mesh(far, tmp_path / "b.obj")
    assert main(["eval", str(tmp_path / "a.obj"), str(tmp_path / "a.obj"), str(tmp_path / "same.json"),
                 "--samples", "5000"]) == 0
    same = json.loads((tmp_path / "same.json").read_text())["aggregate"]
    assert same["iou"] == 1.0
    assert same["chamfer_l1"] == pytest.approx(0.0, abs=1e-9)
    assert same["normal_consistency"] == pytest.approx(1.0)
    assert main(["eval", str(tmp_path / "b.obj"), str(tmp_path / "a.obj"), str(tmp_path / "apart.json"),
                 "--samples", "5000"]) == 0
    assert json.loads((tmp_path / "apart.json").read_text())["aggregate"]["iou"] == 0.0


def test_eval_spec_json_ground_truth(tmp_path):
    spec = shapegen.box((0.5, 0.5, 0.5))
    (tmp_path / "gt.json").write_text(json.dumps(spec.to_dict()))
    from occpcnn.geometry import save_mesh

    save_mesh(shapegen.make_primitive(spec), tmp_path / "p.obj")
    assert main(["eval", str(tmp_path / "p.obj"), str(tmp_path / "gt.json"), str(tmp_path / "r.json"),
                 "--samples", "5000", "--gt-resolution", "32"]) == 0
    assert json.loads((tmp_path / "r.json").read_text())["aggregate"]["iou"] == pytest.approx(1.0, abs=1e-3)


# -- exit codes -------------------------------------------------------------------------


@pytest.mark.parametrize("argv", [
    [],
    ["bogus"],
    ["gen"],
    ["gen", "x", "--set", "train.lr=1"],
    ["gen", "x", "--set", "corpus.n_train"],
    ["reconstruct", "a", "b", "c", "--levels", "16,48"],
    ["reconstruct", "a", "b", "c", "--rotate", "w,30"],
    ["gen", "x", "--threads", "0"],
])
def test_usage_errors(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    assert main(argv) == 1


def test_invalid_config_value(workspace, tmp_path):
    root, net = workspace
    assert main(["train", str(root / "corpus"), str(tmp_path / "m.ocrn"), "--net-config", str(net),
                 "--set", "train.batch_size=0"]) == 1
    assert main(["train", str(root / "corpus"), str(tmp_path / "m.ocrn"), "--set", "net.blocks=[[1,2]]"]) == 1
    assert main(["gen", str(tmp_path / "g"), "--set", "corpus.sampling.noise_sd=-1"]) == 1


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["gen", str(blocker / "corpus"), *TINY_CORPUS]) == 2


def test_missing_inputs(tmp_path):
    assert main(["train", str(tmp_path / "nope"), str(tmp_path / "m.ocrn")]) == 2
    assert main(["reconstruct", str(tmp_path / "nope.ocrn"), str(tmp_path), str(tmp_path / "o.obj")]) == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_exit_code(workspace, tmp_path):
    root, net = workspace
    ck = tmp_path / "m.ocrn"
    code = main(["train", str(root / "corpus"), str(ck), "--net-config", str(net), *TINY_TRAIN,
                 "--set", "train.learning_rate=1e308", "--set", "train.max_steps=40"])
    assert code == 3
    assert (tmp_path / "m.ocrn.nonfinite").exists()


def test_empty_field_exit_code(workspace, tmp_path):
    root, _ = workspace
    ck = constant_checkpoint(tmp_path / "outside.ocrn", -3.0)
    cloud = root / "corpus" / "test" / "test_0000"
    assert main(["reconstruct", str(ck), str(cloud), str(tmp_path / "o.obj"), "--levels", "4,8"]) == 3
    # in batch mode the failure is recorded and the run continues
    assert main(["reconstruct", str(ck), str(root / "corpus" / "test"), str(tmp_path / "dir"), "--levels", "4,8"]) == 0
    manifest = json.loads((tmp_path / "dir" / "manifest.json").read_text())
    assert sorted(manifest["empty_field"]) == ["test_0000", "test_0001"]


def test_threads_flag(workspace, tmp_path):
    root, _ = workspace
    ck = constant_checkpoint(tmp_path / "inside.ocrn", 3.0)
    a, b = tmp_path / "a.obj", tmp_path / "b.obj"
    cloud = str(root / "corpus" / "test" / "test_0000")
    assert main(["--threads", "1", "reconstruct", str(ck), cloud, str(a), "--levels", "4,8"]) == 0
    assert main(["reconstruct", str(ck), cloud, str(b), "--levels", "4,8"]) == 0
    assert a.read_bytes() == b.read_bytes()


# -- helpers ------------------------------------------------------------------------------


def test_apply_overrides():
    base = {"a": 1, "sampling": {"b": 2}}
    out = apply_overrides(base, ["corpus.a=3", "corpus.sampling.b=0.5", "corpus.name=abc", "train.x=1"], "corpus")
    assert out == {"a": 3, "sampling": {"b": 0.5}, "name": "abc"}
    assert base == {"a": 1, "sampling": {"b": 2}}
    with pytest.raises(UsageError):
        apply_overrides(base, ["corpus.a"], "corpus")
    with pytest.raises(UsageError):
        apply_overrides(base, ["corpus.a.b=1"], "corpus")


def test_parse_helpers():
    assert parse_levels("32,64") == (32, 64)
    assert parse_rotation(None) is None
    np.testing.assert_allclose(parse_rotation("x,180") @ [0, 1, 0], [0, -1, 0], atol=1e-12)
    with pytest.raises(UsageError):
        parse_levels("a,b")
    with pytest.raises(UsageError):
        parse_rotation("z")
