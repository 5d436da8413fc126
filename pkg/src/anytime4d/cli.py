"""``anytime4d`` command line: gen, train, query, metrics, report, ablate.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Every command writes its effective configuration to ``config.json`` beside its outputs.
The environment variable ``ANYTIME4D_THREADS`` sets the torch thread count.

On-disk layouts (all arrays are tensor archives, see :mod:`anytime4d.archive`):

    dataset/      dataset.json + config.json + seq_00000/ ... (kind "sequence")
    train out/    config.json, train_log.csv, checkpoints/step_000000/ ... (kind "checkpoint")
    query out/    archive of kind "prediction": depth, depth_log_sigma, rays, ray_log_sigma,
                  fov, quat, trans, base (all frames), deltas + motion_log_sigma (query frame,
                  one per target), targets; meta holds query, normalization and provenance
    metrics out/  report.json, report.csv
    report out/   aggregate.csv, aggregate.txt
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .archive import ArchiveError, read_archive, write_archive
from .config import ConfigError, RunConfig
from .evalmetrics import METRIC_FIELDS, MetricReport, aggregate_reports, reports_to_csv
from .export import trajectory_polylines, write_ply
from .inference import (Prediction, default_query, evaluate, ground_truth_prediction, predict,
                        prediction_from_forward)
from .model import Forward4D, Model4D, MotionPrediction, base_points
from .scenegen import GroundTruthBundle, generate, load_bundle, random_spec, save_bundle
from .streaming import LatentCache, geometry_streaming, ingest_frame, query_streaming
from .training import NonFiniteLoss, Trainer, load_model, lr_at

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
ABLATIONS = {
    "full": [],
    "no_cross_attn": ["model.motion_variant=no_cross_attn"],
    "no_self_attn": ["model.motion_variant=no_self_attn"],
    "no_adaln": ["model.motion_variant=no_adaln"],
    "points_world": ["model.output_param=points_world"],
    "points_local": ["model.output_param=points_local"],
}


class DataError(ValueError):
    pass


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    return cfg.with_overrides(getattr(args, "set", None) or [])


# ---------------------------------------------------------------------------
# gen

def sequence_seed(base: int, k: int) -> int:
    return base + k


def cmd_gen(cfg: RunConfig, out: Path) -> list[str]:
    g = cfg.gen
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for k in range(g.count):
        seed = sequence_seed(g.seed, k)
        res = g.resolution
        if g.resolutions:
            res = g.resolutions[int(np.random.Generator(np.random.PCG64(seed)).integers(len(g.resolutions)))]
        spec = random_spec(seed, g.num_frames, tuple(res), g.num_objects, g.object_speed, g.camera_speed,
                           g.background, g.static)
        sid = f"seq_{k:05d}"
        save_bundle(generate(spec), out / sid, spec)
        entries.append({"id": sid, "seed": seed, "resolution": list(res)})
    manifest = {"schema_version": 1, "kind": "dataset", "sequences": entries, "gen": cfg.to_dict()["gen"]}
    (out / "dataset.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    cfg.dump(out)
    return [e["id"] for e in entries]


def load_dataset(path: Path) -> list[GroundTruthBundle]:
    path = Path(path)
    try:
        manifest = json.loads((path / "dataset.json").read_text())
    except FileNotFoundError as e:
        raise DataError(f"{path} has no dataset.json") from e
    return [load_bundle(path / e["id"]) for e in manifest["sequences"]]


# ---------------------------------------------------------------------------
# train

LOG_FIELDS = ["step", "lr", "depth", "ray", "camera", "motion", "total"]


def _check_compatible(cfg: RunConfig, bundles):
    p = cfg.model.patch_size
    for b in bundles:
        H, W = b.shape
        if H % p or W % p or (H // 2) % (p // 2) or b.num_frames < 2:
            raise DataError(f"sequence of shape {H}x{W}x{b.num_frames} does not fit patch size {p}")


def cmd_train(cfg: RunConfig, data: Path, out: Path, resume: Path | None = None) -> Path:
    bundles = load_dataset(data)
    _check_compatible(cfg, bundles)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out)
    ckdir = out / "checkpoints"
    log_path = out / "train_log.csv"
    if resume is not None:
        trainer = Trainer.load(resume, bundles, cfg.train)
        if trainer.model.cfg.to_dict() != cfg.model.to_dict():
            raise ConfigError("checkpoint model config differs from the run config")
        rows = []
        if log_path.exists():
            with open(log_path) as f:
                rows = [r for r in csv.DictReader(f) if int(r["step"]) <= trainer.step]
        with open(log_path, "w", newline="") as f:
            w = csv.DictWriter(f, LOG_FIELDS, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)
    else:
        torch.manual_seed(cfg.train.seed)
        trainer = Trainer(Model4D(cfg.model), bundles, cfg.train)
        with open(log_path, "w", newline="") as f:
            csv.DictWriter(f, LOG_FIELDS, lineterminator="\n").writeheader()
        trainer.save(ckdir / "step_000000")

    last = ckdir / f"step_{trainer.step:06d}"
    with open(log_path, "a", newline="") as f:
        w = csv.DictWriter(f, LOG_FIELDS, lineterminator="\n")

        def on_step(step, br):
            nonlocal last
            w.writerow({"step": step, "lr": lr_at(step - 1, cfg.train), **br.row()})
            if step % cfg.train.checkpoint_every == 0 or step == cfg.train.steps:
                f.flush()
                last = trainer.save(ckdir / f"step_{step:06d}")

        trainer.run(max(cfg.train.steps - trainer.step, 0), on_step)
    return last


# ---------------------------------------------------------------------------
# query

@torch.no_grad()
def predict_streaming(model: Model4D, frames: np.ndarray, query: int, targets) -> Prediction:
    n = len(frames)
    times = Model4D.normalized_times(n).numpy()
    cache = LatentCache(model)
    for k in range(n):
        ingest_frame(cache, frames[k], float(times[k]))
    geom = geometry_streaming(cache)
    motions = [query_streaming(cache, query, t) for t in targets]
    motion = MotionPrediction(torch.cat([m.deltas for m in motions]), torch.cat([m.log_sigma for m in motions]))
    out = Forward4D(cache.latent(), geom, base_points(geom), query, list(targets), motion, model.cfg.output_param)
    return prediction_from_forward(out)


def _parse_targets(text: str | None, n: int) -> list[int]:
    if text is None or text == "all":
        return list(range(n))
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise ConfigError(f"targets must be a comma-separated list of frame indices: {text!r}") from e


def cmd_query(checkpoint: Path | None, sequence: Path, source: int | None, targets: str | None, out: Path,
              streaming: bool = False, ply: Path | None = None, oracle: bool = False,
              normalize: bool = True) -> Prediction:
    bundle = load_bundle(sequence)
    scale = 1.0
    if normalize:
        bundle, scale = bundle.normalized()
    n = bundle.num_frames
    q = default_query(n) if source is None else source
    tl = _parse_targets(targets, n)
    if not 0 <= q < n or any(not 0 <= t < n for t in tl):
        raise IndexError(f"source {q} / targets {tl} outside [0, {n})")
    meta = {"query": q, "normalized": normalize, "scale": scale, "sequence": str(sequence),
            "streaming": streaming, "oracle": oracle}
    if oracle:
        pred = ground_truth_prediction(bundle, q, tl)
        model_cfg = None
    else:
        if checkpoint is None:
            raise ConfigError("--checkpoint is required unless --oracle is given")
        model = load_model(checkpoint)
        model_cfg = model.cfg.to_dict()
        H, W = bundle.shape
        if H % model.cfg.patch_size or W % model.cfg.patch_size:
            raise DataError(f"sequence {H}x{W} does not fit the checkpoint's patch size")
        meta["checkpoint"] = str(checkpoint)
        if streaming:
            pred = predict_streaming(model, bundle.frames, q, tl)
        else:
            pred = predict(model, bundle.frames, q, tl)
    arrays, pmeta = pred.to_arrays()
    write_archive(out, arrays, {**meta, **pmeta, "model_config": model_cfg}, kind="prediction")
    if ply is not None:
        Path(ply).parent.mkdir(parents=True, exist_ok=True)
        valid = np.isfinite(pred.base[q]).all(-1) & (pred.depth[q] > 0)
        write_ply(ply, pred.base[q][valid], bundle.frames[q][valid])
        v, c, e = trajectory_polylines(pred.tracks()[np.argsort(tl)], valid)
        write_ply(Path(ply).with_name(Path(ply).stem + "_tracks.ply"), v, c, e)
    return pred


# ---------------------------------------------------------------------------
# metrics / report

def cmd_metrics(pred_path: Path, gt_path: Path, cfg: RunConfig, out: Path) -> MetricReport:
    arrays, manifest = read_archive(pred_path)
    if manifest.get("kind") != "prediction":
        raise DataError(f"{pred_path} is not a prediction archive")
    pred = Prediction.from_arrays(arrays, manifest["meta"])
    bundle = load_bundle(gt_path)
    if manifest["meta"].get("normalized", False):
        bundle, _ = bundle.normalized()
    if "depth" in cfg.eval.metrics and "depth" not in arrays:
        raise DataError("depth metrics requested but the prediction has no depth")
    gt_path = Path(gt_path)
    report = evaluate(pred, bundle, name=gt_path.name, **cfg.eval.kwargs())
    report.extra["dataset"] = gt_path.resolve().parent.name
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n")
    (out / "report.csv").write_text(reports_to_csv([report]))
    cfg.dump(out)
    return report


def format_table(reports: list[MetricReport]) -> str:
    cols = ["name", *[m for m in METRIC_FIELDS if any(getattr(r, m) is not None for r in reports)]]
    rows = [[r.name] + [("-" if getattr(r, m) is None else f"{getattr(r, m):.4f}") for m in cols[1:]]
            for r in reports]
    widths = [max(len(c), *(len(row[k]) for row in rows)) for k, c in enumerate(cols)]
    line = lambda cells: "  ".join(c.rjust(w) for c, w in zip(cells, widths))
    return "\n".join([line(cols), line(["-" * w for w in widths]), *map(line, rows)])


def cmd_report(paths: list[Path], out: Path) -> list[MetricReport]:
    reports = []
    for p in paths:
        try:
            reports.append(MetricReport.from_dict(json.loads(Path(p).read_text())))
        except (json.JSONDecodeError, TypeError) as e:
            raise DataError(f"{p} is not a metric report: {e}") from e
    if not reports:
        raise DataError("no reports given")
    groups: dict[str, list[MetricReport]] = {}
    for r in reports:
        groups.setdefault(r.extra.get("dataset", ""), []).append(r)
    try:
        agg = [aggregate_reports(rs, name=name or "all") for name, rs in sorted(groups.items())]
    except ValueError as e:
        raise DataError(str(e)) from e
    out.mkdir(parents=True, exist_ok=True)
    (out / "aggregate.csv").write_text(reports_to_csv(agg))
    table = format_table(agg)
    (out / "aggregate.txt").write_text(table + "\n")
    print(table)
    return agg


# ---------------------------------------------------------------------------
# ablate

def evaluate_checkpoint(checkpoint: Path, bundles, cfg: RunConfig, dataset_name: str) -> list[MetricReport]:
    model = load_model(checkpoint)
    reports = []
    for k, b in enumerate(bundles):
        b, _ = b.normalized()
        q = default_query(b.num_frames) if cfg.eval.query is None else cfg.eval.query
        pred = predict(model, b.frames, q, list(range(b.num_frames)))
        r = evaluate(pred, b, name=f"seq_{k:05d}", **cfg.eval.kwargs())
        r.extra["dataset"] = dataset_name
        reports.append(r)
    return reports


def cmd_ablate(cfg: RunConfig, data: Path, out: Path, variants: list[str], eval_data: Path | None = None):
    unknown = [v for v in variants if v not in ABLATIONS]
    if unknown:
        raise ConfigError(f"unknown variants {unknown}; choose from {list(ABLATIONS)}")
    eval_bundles = load_dataset(eval_data or data)
    out.mkdir(parents=True, exist_ok=True)
    cfg.dump(out)
    summary = []
    for v in variants:
        vcfg = cfg.with_overrides(ABLATIONS[v])
        ckpt = cmd_train(vcfg, data, out / v)
        reports = evaluate_checkpoint(ckpt, eval_bundles, vcfg, v)
        for r in reports:
            d = out / v / "reports" / r.name
            d.mkdir(parents=True, exist_ok=True)
            (d / "report.json").write_text(r.to_json() + "\n")
        summary.append(aggregate_reports(reports, name=v))
    (out / "ablation.csv").write_text(reports_to_csv(summary))
    table = format_table(summary)
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    return summary


# ---------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="anytime4d", description="Encode once, query geometry and motion anytime.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, help="run config JSON")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
        p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    common(p)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("train", help="train on a generated dataset")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")

    p = sub.add_parser("query", help="predict geometry and motion for one sequence")
    common(p)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--sequence", type=Path, required=True)
    p.add_argument("--source", type=int, help="query frame (default: middle frame)")
    p.add_argument("--targets", help="comma-separated target frames (default: all)")
    p.add_argument("--streaming", action="store_true", help="encode frame by frame through the latent cache")
    p.add_argument("--ply", type=Path, help="write the base pointmap here and trajectories beside it")
    p.add_argument("--oracle", action="store_true", help="emit the ground truth as the prediction")
    p.add_argument("--no-normalize", action="store_true", help="skip scene normalization of the input")

    p = sub.add_parser("metrics", help="score a prediction archive against ground truth")
    common(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--gt", type=Path, required=True)
    p.add_argument("--align", choices=["sim3_ransac", "median_scale", "none"])
    p.add_argument("--depth-align", choices=["scale", "scale_shift"])
    p.add_argument("--metrics", help="comma-separated subset of tracking,pose,depth,recon")

    p = sub.add_parser("report", help="aggregate metric reports per dataset")
    p.add_argument("reports", type=Path, nargs="+")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("ablate", help="train and evaluate motion-head and output ablations")
    common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--eval-data", type=Path)
    p.add_argument("--steps", type=int)
    p.add_argument("--variants", default=",".join(ABLATIONS), help="comma-separated subset of " + ",".join(ABLATIONS))
    return ap


def _flag_overrides(args) -> list[str]:
    sets = []
    for flag, key in (("count", "gen.count"), ("seed", "gen.seed"), ("steps", "train.steps"),
                      ("align", "eval.align"), ("depth_align", "eval.depth_align")):
        v = getattr(args, flag, None)
        if v is not None:
            sets.append(f"{key}={json.dumps(v)}")
    if getattr(args, "metrics", None):
        sets.append("eval.metrics=" + json.dumps([m.strip() for m in args.metrics.split(",")]))
    return sets


def run(args) -> int:
    if args.command == "report":
        cmd_report(args.reports, args.out)
        return EXIT_OK
    cfg = _config(args).with_overrides(_flag_overrides(args))
    if args.command == "gen":
        ids = cmd_gen(cfg, args.out)
        print(f"wrote {len(ids)} sequences to {args.out}")
    elif args.command == "train":
        last = cmd_train(cfg, args.data, args.out, args.resume)
        print(f"checkpoint: {last}")
    elif args.command == "query":
        args.out.parent.mkdir(parents=True, exist_ok=True)
        cmd_query(args.checkpoint, args.sequence, args.source, args.targets, args.out, args.streaming,
                  args.ply, args.oracle, not args.no_normalize)
        cfg.dump(args.out)
        print(f"prediction: {args.out}")
    elif args.command == "metrics":
        report = cmd_metrics(args.pred, args.gt, cfg, args.out)
        print(json.dumps(report.metrics(), indent=1))
    elif args.command == "ablate":
        cmd_ablate(cfg, args.data, args.out, [v.strip() for v in args.variants.split(",") if v.strip()],
                   args.eval_data)
    return EXIT_OK


def main(argv=None) -> int:
    threads = os.environ.get("ANYTIME4D_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLoss as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ArchiveError, DataError, FileNotFoundError, KeyError, IndexError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
