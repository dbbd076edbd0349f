"""Command-line entry point: ``sacseg <command> [options]``.

Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import cost, snapshot, verify
from .data import DatasetSpec, SceneConfig, dataset, generate_scene, load_any
from .network import PRESETS, NetworkConfig
from .projection import (ProjectionConfig, build_lidar_image, channel_stats, default_sample_pixels,
                         spatial_prior_scores, write_stats)
from .train import RunManifest, TrainConfig, TrainingDiverged, eval_checkpoint, train

log = logging.getLogger("sacseg")


class UsageError(Exception):
    pass


def _single_thread():
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not valid JSON: {exc}") from None


def _parse_pixels(text: str | None, h: int, w: int) -> list[tuple[int, int]]:
    if not text:
        return default_sample_pixels(h, w)
    try:
        return [tuple(int(v) for v in item.split(",")) for item in text.split(";") if item]
    except ValueError:
        raise UsageError(f"--pixels expects 'q,p;q,p;...', got {text!r}") from None


# -- commands ------------------------------------------------------------------

def cmd_project(args, manifest: RunManifest) -> int:
    cfg = ProjectionConfig(**_read_json(args.cfg)) if args.cfg else None
    if args.input:
        manifest.config_paths["input"] = str(args.input)
        try:
            cloud = load_any(args.input)
        except (OSError, ValueError) as exc:
            print(f"error: cannot read {args.input}: {exc}", file=sys.stderr)
            return 1
        cfg = cfg or ProjectionConfig()
    else:
        scene = SceneConfig(seed=args.seed)
        manifest.seeds["scene"] = args.seed
        cloud = generate_scene(scene)
        cfg = cfg or scene.projection()
    if len(cloud) == 0:
        print(f"error: {args.input} holds no points", file=sys.stderr)
        return 1
    with manifest.phase("project"):
        img = build_lidar_image(cloud, cfg)
    out = Path(args.out)
    snapshot.save(out / "features.bin", img.features)
    snapshot.save(out / "mask.bin", img.mask.astype(np.float64))
    snapshot.save(out / "index_map.bin", img.index_map.astype(np.float64))
    if img.label_map is not None:
        snapshot.save(out / "label_map.bin", img.label_map.astype(np.float64))
    summary = dict(img.summary, h=cfg.h, w=cfg.w)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    text = "\n".join(f"{k}: {v}" for k, v in summary.items())
    (out / "summary.txt").write_text(text + "\n")
    print(text)
    return 0


def cmd_verify(args, manifest: RunManifest) -> int:
    results = {}
    ok = True
    for suite in args.suite:
        with manifest.phase(suite):
            passed = verify.run_suite(suite)
        results[suite] = passed
        ok &= passed
    manifest.extra["suites"] = results
    return 0 if ok else 1


def cmd_cost(args, manifest: RunManifest) -> int:
    if args.network_config:
        manifest.config_paths["network"] = str(args.network_config)
        cfg = NetworkConfig.from_dict(_read_json(args.network_config))
    else:
        cfg = PRESETS[args.preset](input_hw=tuple(args.input_hw))
    with manifest.phase("cost"):
        rows = cost.write_outputs(cfg, args.out)
    print(cost.format_table(rows))
    return 0


def _train_config(args) -> TrainConfig:
    data = _read_json(args.config) if args.config else {}
    try:
        cfg = TrainConfig.from_dict(data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad training config: {exc}") from None
    if args.seed is not None:
        cfg.seed = args.seed
    if args.epochs is not None:
        cfg.epochs = args.epochs
    return cfg


def cmd_train(args, manifest: RunManifest) -> int:
    cfg = _train_config(args)
    if args.config:
        manifest.config_paths["train"] = str(args.config)
    try:
        summary = train(cfg, args.out, manifest)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({k: summary[k] for k in ("best_epoch", "best_val_miou", "best_val_accuracy")}))
    return 0


def _eval_spec(args) -> DatasetSpec:
    if args.dataset:
        return DatasetSpec(**_read_json(args.dataset))
    run_cfg = Path(args.checkpoint).parent / "config.json"
    if not run_cfg.exists():
        raise UsageError(f"--split needs {run_cfg}; pass --dataset instead")
    cfg = TrainConfig.load(run_cfg)
    return cfg.train if args.split == "train" else cfg.val


def cmd_eval(args, manifest: RunManifest) -> int:
    manifest.config_paths["checkpoint"] = str(args.checkpoint)
    spec = _eval_spec(args)
    with manifest.phase("eval"):
        try:
            report = eval_checkpoint(args.checkpoint, spec, args.out)
        except FileNotFoundError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 1
    print(f"mIoU {report['miou']:.4f}  accuracy {report['accuracy']:.4f}")
    for name, v in report["iou"].items():
        print(f"  {name:<12} {'n/a' if v is None else f'{v:.4f}'}")
    return 0


def cmd_stats(args, manifest: RunManifest) -> int:
    if args.dataset:
        manifest.config_paths["dataset"] = str(args.dataset)
        spec = DatasetSpec(**_read_json(args.dataset))
    else:
        spec = DatasetSpec(count=args.scans, base_seed=args.seed)
    with manifest.phase("data"):
        images = [s.image for s in dataset(spec)]
    h, w = images[0].hw
    pixels = _parse_pixels(args.pixels, h, w)
    with manifest.phase("stats"):
        stats = channel_stats(images, pixels)
        write_stats(stats, args.out)
        scores = spatial_prior_scores(stats)
    report = {"row_z_spearman": scores["row_z_spearman"], "col_x_pearson": scores["col_x_pearson"],
              "row_x_pearson_min": float(np.min(np.abs(scores["row_x_pearson"])))
              if len(scores["row_x_pearson"]) else None, "scans": len(images)}
    (Path(args.out) / "prior.json").write_text(json.dumps(report, indent=2) + "\n")
    print(json.dumps(report))
    return 0


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sacseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    parser.add_argument("--deterministic", action="store_true",
                        help="limit BLAS to one thread for bit-reproducible runs")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", help="project a point cloud into a LiDAR image")
    p.add_argument("--input", type=Path, help="cloud cache or KITTI .bin (default: a synthetic scan)")
    p.add_argument("--seed", type=int, default=0, help="synthetic scene seed when --input is absent")
    p.add_argument("--cfg", type=Path, help="projection config JSON")
    p.add_argument("--out", type=Path, default=Path("runs/project"))
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("verify", help="run self-check suites")
    p.add_argument("--suite", nargs="+", choices=sorted(verify.SUITES), default=sorted(verify.SUITES))
    p.add_argument("--out", type=Path, default=Path("runs/verify"))
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("cost", help="parameter / MAC overhead per SAC variant")
    p.add_argument("--network-config", type=Path)
    p.add_argument("--preset", choices=sorted(PRESETS), default="ssgv3-21")
    p.add_argument("--input-hw", type=int, nargs=2, default=(64, 2048), metavar=("H", "W"))
    p.add_argument("--out", type=Path, default=Path("runs/cost"))
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("train", help="train a network")
    p.add_argument("--config", type=Path, help="training config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", type=Path, default=Path("runs/train"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--dataset", type=Path, help="dataset spec JSON (overrides --split)")
    p.add_argument("--out", type=Path, default=Path("runs/eval"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("stats", help="per-pixel feature distributions")
    p.add_argument("--dataset", type=Path, help="dataset spec JSON")
    p.add_argument("--scans", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pixels", help="sample pixels as 'q,p;q,p;...' (default: 3x3 grid)")
    p.add_argument("--out", type=Path, default=Path("runs/stats"))
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(command=" ".join(["sacseg"] + list(argv if argv is not None else sys.argv[1:])),
                           output_dir=str(args.out))
    manifest.extra["deterministic"] = args.deterministic
    code = 1
    try:
        with _single_thread() if args.deterministic else nullcontext():
            code = args.func(args, manifest)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 2
    finally:
        if manifest.status == "running":
            manifest.status = "ok" if code == 0 else "failed"
        manifest.extra["exit_code"] = code
        manifest.write()
    return code
