import csv
import json

import numpy as np
import pytest

from anytime4d.archive import ArchiveError, read_archive, read_manifest, write_archive
from anytime4d.cli import ABLATIONS, main
from anytime4d.config import ConfigError, RunConfig
from anytime4d.evalmetrics import MetricReport
from anytime4d.export import read_ply
from anytime4d.inference import Prediction, evaluate
from anytime4d.scenegen import generate, load_bundle, random_spec

TINY = ["model.embed_dim=16", "model.encoder_layers=2", "model.heads=2", "model.motion_layers=2",
        "model.mlp_ratio=2.0", "model.head_hidden=16", "gen.num_frames=4", "gen.resolution=[16,16]"]


def sets(extra=()):
    out = []
    for s in [*TINY, *extra]:
        out += ["--set", s]
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen", "--out", str(d), "--count", "2", "--seed", "3", *sets()]) == 0
    return d


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    d = tmp_path_factory.mktemp("train")
    assert main(["train", "--data", str(dataset), "--out", str(d), "--steps", "4",
                 *sets(["train.checkpoint_every=2", "model.causal=true"])]) == 0
    return d


# ---------------------------------------------------------------------------
# archives and config

def test_archive_round_trip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([True, False]),
              "c": np.array([1, -2], np.int32), "d": np.zeros((0, 3)), "e": np.array([7], np.uint8)}
    write_archive(tmp_path / "x", arrays, {"k": 1}, kind="t")
    back, manifest = read_archive(tmp_path / "x")
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and np.array_equal(back[k], v)
    assert manifest["meta"] == {"k": 1} and manifest["byte_order"] == "little"


def test_archive_rejects_corruption(tmp_path):
    write_archive(tmp_path / "x", {"a": np.zeros(4, np.float32)})
    (tmp_path / "x" / "a.bin").write_bytes(b"\0" * 3)
    with pytest.raises(ArchiveError):
        read_archive(tmp_path / "x")
    m = json.loads((tmp_path / "x" / "manifest.json").read_text())
    m["schema_version"] = 99
    (tmp_path / "x" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ArchiveError):
        read_manifest(tmp_path / "x")


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"stepz": 3}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"extra": {}})
    with pytest.raises(ConfigError):
        RunConfig().with_overrides(["model.nope=1"])
    cfg = RunConfig().with_overrides(["train.steps=7", "eval.align=none"])
    assert RunConfig.from_dict(json.loads(cfg.to_json())) == cfg
    bad = tmp_path / "bad.json"
    bad.write_text('{"gen": {"cnt": 1}}')
    assert main(["gen", "--out", str(tmp_path / "o"), "--config", str(bad)]) == 2


# ---------------------------------------------------------------------------
# gen

def test_gen_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen", "--out", str(tmp_path / name), "--count", "1", "--seed", "7", *sets()]) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_manifest_and_round_trip(dataset):
    manifest = json.loads((dataset / "dataset.json").read_text())
    ids = [e["id"] for e in manifest["sequences"]]
    on_disk = sorted(p.name for p in dataset.iterdir() if p.is_dir())
    assert ids == on_disk == ["seq_00000", "seq_00001"]
    disk = load_bundle(dataset / "seq_00001")
    mem = generate(random_spec(4, num_frames=4, resolution=(16, 16)))
    for k in ("frames", "depth", "valid", "local_points", "body_poses"):
        assert np.array_equal(getattr(disk, k), getattr(mem, k))
    assert (dataset / "config.json").exists()


# ---------------------------------------------------------------------------
# train

def test_train_zero_steps(tmp_path, dataset):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--steps", "0", *sets()]) == 0
    assert [p.name for p in (tmp_path / "checkpoints").iterdir()] == ["step_000000"]
    assert len(list(csv.DictReader(open(tmp_path / "train_log.csv")))) == 0


def test_train_log_and_checkpoints(trained):
    rows = list(csv.DictReader(open(trained / "train_log.csv")))
    assert [int(r["step"]) for r in rows] == [1, 2, 3, 4]
    assert sorted(p.name for p in (trained / "checkpoints").iterdir()) == \
        ["step_000000", "step_000002", "step_000004"]
    m = read_manifest(trained / "checkpoints" / "step_000004")
    assert m["kind"] == "checkpoint" and m["meta"]["step"] == 4
    assert all(e["dtype"] == "float32" for k, e in m["arrays"].items() if k.startswith("param__"))


def test_train_resume_matches(tmp_path, dataset, trained):
    out = tmp_path / "resumed"
    args = ["train", "--data", str(dataset), "--out", str(out), "--steps", "4",
            *sets(["train.checkpoint_every=2", "model.causal=true"])]
    assert main(args + ["--resume", str(trained / "checkpoints" / "step_000002")]) == 0
    full = list(csv.DictReader(open(trained / "train_log.csv")))
    resumed = list(csv.DictReader(open(out / "train_log.csv")))
    assert [r["step"] for r in resumed] == ["3", "4"]
    for a, b in zip(full[2:], resumed):
        assert abs(float(a["total"]) - float(b["total"])) < 1e-6


def test_train_shape_mismatch_is_data_error(tmp_path, dataset):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--steps", "1",
                 *sets(["model.patch_size=32"])]) == 3


# ---------------------------------------------------------------------------
# query

def ckpt(trained):
    return str(trained / "checkpoints" / "step_000004")


def test_query_self_displacement_and_ply(tmp_path, dataset, trained):
    out, ply = tmp_path / "pred", tmp_path / "base.ply"
    assert main(["query", "--checkpoint", ckpt(trained), "--sequence", str(dataset / "seq_00000"),
                 "--source", "1", "--targets", "1", "--out", str(out), "--ply", str(ply)]) == 0
    arrays, manifest = read_archive(out)
    assert arrays["deltas"].shape[0] == 1 and list(arrays["targets"]) == [1]
    assert arrays["depth"].shape[0] == 4
    pts, rgb, _ = read_ply(ply)
    valid = np.isfinite(arrays["base"][1]).all(-1) & (arrays["depth"][1] > 0)
    assert len(pts) == int(valid.sum())
    _, _, edges = read_ply(tmp_path / "base_tracks.ply")
    assert edges is not None and len(edges) == 0


def test_query_streaming_prefix_invariance(tmp_path, dataset, trained):
    seq = dataset / "seq_00001"
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["query", "--checkpoint", ckpt(trained), "--sequence", str(seq), "--source", "0",
                 "--targets", "0,1,2,3", "--out", str(a), "--streaming"]) == 0
    assert main(["query", "--checkpoint", ckpt(trained), "--sequence", str(seq), "--source", "0",
                 "--targets", "0,1,2,3", "--out", str(b)]) == 0
    sa, _ = read_archive(a)
    ob, _ = read_archive(b)
    # causal weights: streaming and offline paths agree
    assert np.allclose(sa["deltas"], ob["deltas"], atol=1e-5)
    # perturbing the last frame leaves queries among earlier frames untouched
    import shutil
    alt = tmp_path / "seq_alt"
    shutil.copytree(seq, alt)
    frames, _ = read_archive(alt)
    f = frames["frames"].copy()
    f[3] = 1.0 - f[3]
    (alt / "frames.bin").write_bytes(f.astype("<f4").tobytes() if f.dtype == np.float32 else f.astype("<f8").tobytes())
    c = tmp_path / "c"
    assert main(["query", "--checkpoint", ckpt(trained), "--sequence", str(alt), "--source", "0",
                 "--targets", "0,1,2", "--out", str(c), "--streaming", "--no-normalize"]) == 0
    d = tmp_path / "d"
    assert main(["query", "--checkpoint", ckpt(trained), "--sequence", str(seq), "--source", "0",
                 "--targets", "0,1,2", "--out", str(d), "--streaming", "--no-normalize"]) == 0
    assert np.array_equal(read_archive(c)[0]["deltas"], read_archive(d)[0]["deltas"])


def test_query_errors(tmp_path, dataset, trained):
    seq = str(dataset / "seq_00000")
    assert main(["query", "--checkpoint", ckpt(trained), "--sequence", seq, "--source", "9",
                 "--out", str(tmp_path / "p")]) == 3
    assert main(["query", "--sequence", seq, "--out", str(tmp_path / "p")]) == 2


# ---------------------------------------------------------------------------
# metrics and report

@pytest.fixture(scope="module")
def oracle_pred(tmp_path_factory, dataset):
    d = tmp_path_factory.mktemp("oracle")
    assert main(["query", "--oracle", "--sequence", str(dataset / "seq_00000"), "--out", str(d / "pred")]) == 0
    return d / "pred"


def test_metrics_perfect_prediction(tmp_path, dataset, oracle_pred):
    assert main(["metrics", "--pred", str(oracle_pred), "--gt", str(dataset / "seq_00000"),
                 "--out", str(tmp_path)]) == 0
    r = MetricReport.from_dict(json.loads((tmp_path / "report.json").read_text()))
    assert r.apd == 100.0 and r.epe == 0.0 and r.ate == 0.0
    assert r.depth_rel == 0.0 and r.depth_delta == 100.0
    assert r.acc == 0.0 and r.comp == 0.0 and r.nc == pytest.approx(1.0, abs=1e-12)
    assert (tmp_path / "report.csv").read_text().startswith("name,apd,epe")


def test_metrics_alignment_recorded(tmp_path, dataset, oracle_pred):
    for mode in ("median_scale", "sim3_ransac"):
        assert main(["metrics", "--pred", str(oracle_pred), "--gt", str(dataset / "seq_00000"),
                     "--out", str(tmp_path / mode), "--align", mode]) == 0
        r = json.loads((tmp_path / mode / "report.json").read_text())
        assert r["alignment"]["tracking"]["mode"] == mode


def test_metrics_cli_library_parity(tmp_path, dataset, trained):
    pred_dir = tmp_path / "pred"
    assert main(["query", "--checkpoint", ckpt(trained), "--sequence", str(dataset / "seq_00001"),
                 "--out", str(pred_dir)]) == 0
    assert main(["metrics", "--pred", str(pred_dir), "--gt", str(dataset / "seq_00001"),
                 "--out", str(tmp_path / "m")]) == 0
    cli = MetricReport.from_dict(json.loads((tmp_path / "m" / "report.json").read_text()))
    arrays, manifest = read_archive(pred_dir)
    bundle, _ = load_bundle(dataset / "seq_00001").normalized()
    lib = evaluate(Prediction.from_arrays(arrays, manifest["meta"]), bundle)
    for k, v in lib.metrics().items():
        assert abs(getattr(cli, k) - v) <= 1e-12


def test_metrics_protocol_mismatch(tmp_path, dataset, oracle_pred):
    assert main(["metrics", "--pred", str(dataset / "seq_00000"), "--gt", str(dataset / "seq_00000"),
                 "--out", str(tmp_path)]) == 3
    assert main(["metrics", "--pred", str(oracle_pred), "--gt", str(dataset / "seq_00000"),
                 "--out", str(tmp_path), "--metrics", "tracking,bogus"]) == 2


def write_report(path, **kw):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(MetricReport(**kw).to_json())
    return str(path)


def test_report_single_and_mean(tmp_path):
    a = write_report(tmp_path / "a.json", name="a", apd=40.0, epe=0.5, extra={"dataset": "d"})
    b = write_report(tmp_path / "b.json", name="b", apd=60.0, epe=0.25, extra={"dataset": "d"})
    assert main(["report", a, "--out", str(tmp_path / "one")]) == 0
    row = next(csv.DictReader(open(tmp_path / "one" / "aggregate.csv")))
    assert float(row["apd"]) == 40.0 and float(row["epe"]) == 0.5
    assert main(["report", a, b, "--out", str(tmp_path / "two")]) == 0
    first = (tmp_path / "two" / "aggregate.csv").read_text()
    row = next(csv.DictReader(open(tmp_path / "two" / "aggregate.csv")))
    assert float(row["apd"]) == 50.0 and float(row["epe"]) == 0.375
    assert main(["report", b, a, "--out", str(tmp_path / "two")]) == 0
    assert (tmp_path / "two" / "aggregate.csv").read_text() == first
    assert first.splitlines()[0] == "name,apd,epe,ate,rpe_t,rpe_r,acc,comp,nc,depth_rel,depth_delta"


def test_report_inconsistent_sets(tmp_path):
    a = write_report(tmp_path / "a.json", name="a", apd=40.0)
    b = write_report(tmp_path / "b.json", name="b", epe=0.5)
    assert main(["report", a, b, "--out", str(tmp_path / "o")]) == 3


def test_ablation_variants_are_valid_overrides():
    for v, overrides in ABLATIONS.items():
        RunConfig().with_overrides(overrides)
