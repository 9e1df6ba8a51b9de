"""``mapseg`` command-line tool.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence. ``MAPSEG_THREADS`` caps worker threads.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from mapseg import __version__
from mapseg.ensembles import LearnerConfig, TrainedEnsemble, feature_importance
from mapseg.errors import ConfigError, MapsegError
from mapseg.features import FeatureMatrix, FeatureSpec
from mapseg.metrics import EvalConfig, report_table
from mapseg.morphology import StructuringElement, boundary_mask
from mapseg.pipeline import (
    build_run_config,
    evaluate_dirs,
    extract_features,
    load_config,
    model_spec,
    predict_tiles,
    report_meta,
    run_pipeline,
    train_model,
    write_report,
)
from mapseg.raster_io import IMAGE_SUFFIXES, Task, atomic_write_text, read_manifest, read_mask, save_mask
from mapseg.synth import SynthSpec, synth_dataset


def _task(value):
    try:
        return Task.parse(value)
    except MapsegError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_learner_flags(p):
    g = p.add_argument_group("learner")
    g.add_argument("--kind", choices=("rf", "gbdt", "lgbm"))
    g.add_argument("--learning-rate", type=float)
    g.add_argument("--n-rounds", type=int)
    g.add_argument("--n-estimators", type=int)
    g.add_argument("--max-depth", type=int)
    g.add_argument("--num-leaves", type=int)
    g.add_argument("--threshold", type=float)


def _learner_overrides(args) -> dict:
    keys = ("learning_rate", "n_rounds", "n_estimators", "max_depth", "num_leaves", "threshold", "seed")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapseg", description="Building segmentation with tree ensembles.")
    parser.add_argument("--version", action="version", version=f"mapseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic aerial + LiDAR dataset")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--tiles", type=int, default=SynthSpec.n_tiles)
    p.add_argument("--size", type=int, default=SynthSpec.size)
    p.add_argument("--no-shadow", action="store_true")
    p.add_argument("--task", type=_task, default=Task.task2)

    p = sub.add_parser("features", help="build the design matrix from a manifest")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--spec", help="comma-separated feature kinds or a preset name")
    p.add_argument("--task", type=_task)
    p.add_argument("--boundary-mask", action="store_true")
    p.add_argument("--kernel", type=int, default=7)
    p.add_argument("--lidar-fill", type=float)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("boundary-mask", help="write boundary masks for every mask in a folder")
    p.add_argument("--in", dest="src", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--kernel", type=int, default=7)

    p = sub.add_parser("train", help="train an ensemble on a design matrix")
    p.add_argument("--matrix", required=True, type=Path)
    p.add_argument("--seed", required=True, type=int)
    p.add_argument("--config", type=Path, help="TOML file; [model] and [features] params are read")
    p.add_argument("--out", required=True, type=Path)
    _add_learner_flags(p)

    p = sub.add_parser("predict", help="predict masks for every tile of a manifest")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--threshold", type=float)
    p.add_argument("--lidar-fill", type=float)
    p.add_argument("--save-prob", action="store_true", help="also write probability grids under prob/")

    p = sub.add_parser("eval", help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--gt", required=True, type=Path, help="mask folder or manifest file")
    p.add_argument("--task", type=_task)
    p.add_argument("--biou-d", type=int, default=EvalConfig.biou_d)
    p.add_argument("--empty-score", type=float, default=EvalConfig.empty_score)
    p.add_argument("--model", type=Path, help="fill classifier/features columns from this model")
    p.add_argument("--images", type=int, help="number of training images for the report table")
    p.add_argument("--bmask", action="store_true", help="mark the run as boundary-mask trained")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("run", help="features, train, predict and eval in one go")
    p.add_argument("--config", type=Path)
    p.add_argument("--task", type=_task)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--train-manifest", type=Path)
    p.add_argument("--test-manifest", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--lidar-fill", type=float)
    p.add_argument("--spec")
    p.add_argument("--boundary-mask", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--kernel", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--biou-d", type=int)
    p.add_argument("--empty-score", type=float)
    _add_learner_flags(p)

    p = sub.add_parser("importance", help="print normalised gain importance of a model")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--out", type=Path, help="also write the ranking as JSON")
    return parser


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    spec = SynthSpec(seed=args.seed, n_tiles=args.tiles, size=args.size, shadow=not args.no_shadow)
    manifest = synth_dataset(spec, args.out, args.task)
    print(f"wrote {len(manifest)} tiles to {args.out}")


def cmd_features(args):
    manifest = read_manifest(args.manifest, args.task)
    spec = FeatureSpec.parse(args.spec) if args.spec else FeatureSpec.for_task(manifest.task)
    matrix = extract_features(manifest, spec, args.boundary_mask, args.kernel, args.lidar_fill)
    matrix.save(args.out)
    print(f"wrote {matrix.n_rows} rows x {len(matrix.columns)} features to {args.out}")


def cmd_boundary_mask(args):
    se = StructuringElement(args.kernel)
    if not args.src.is_dir():
        raise ConfigError(f"input folder not found: {args.src}")
    files = [p for p in sorted(args.src.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES]
    for path in files:
        save_mask(boundary_mask(read_mask(path, path.stem), se), args.out / path.name)
    print(f"wrote {len(files)} boundary masks to {args.out}")


def cmd_train(args):
    cfg = load_config(args.config) if args.config else {}
    model_cfg = dict(cfg.get("model", {}))
    model_cfg.update(_learner_overrides(args))
    kind = args.kind or model_cfg.pop("kind", "lgbm")
    model_cfg.pop("kind", None)
    learner = LearnerConfig.for_kind(kind, **model_cfg)
    params = cfg.get("features", {}).get("params", {})
    matrix = FeatureMatrix.load(args.matrix)
    model = train_model(matrix, learner, FeatureSpec(matrix.columns, params))
    model.save(args.out)
    print(f"trained {kind} with {len(model.trees)} trees -> {args.out}")


def cmd_predict(args):
    model = TrainedEnsemble.load(args.model)
    task = Task.task2 if model_spec(model).uses_lidar else Task.task1
    manifest = read_manifest(args.manifest, task)
    paths = predict_tiles(model, manifest, args.out, args.threshold, args.lidar_fill, args.save_prob)
    print(f"wrote {len(paths)} masks to {args.out}")


def cmd_eval(args):
    config = EvalConfig(biou_d=args.biou_d, empty_score=args.empty_score)
    model = TrainedEnsemble.load(args.model) if args.model else None
    task = args.task
    if task is None:
        task = Task.task2 if model is not None and "lidar" in model.feature_names else Task.task1
    report = evaluate_dirs(args.pred, args.gt, task, config, report_meta(model, args.images, args.bmask))
    write_report(report, args.out)
    sys.stdout.write(report_table(report))


def cmd_run(args):
    cfg = load_config(args.config) if args.config else {}
    overrides = {
        "data": {
            "task": args.task.value if args.task else None,
            "manifest": args.manifest,
            "train_manifest": args.train_manifest,
            "test_manifest": args.test_manifest,
            "out": args.out,
            "lidar_fill": args.lidar_fill,
        },
        "features": {"spec": args.spec, "boundary_mask": args.boundary_mask, "kernel": args.kernel},
        "model": {"kind": args.kind, **_learner_overrides(args)},
        "eval": {"biou_d": args.biou_d, "empty_score": args.empty_score},
    }
    if args.manifest is not None:
        # a flag-given single manifest replaces any split given in the config
        cfg.get("data", {}).pop("train_manifest", None)
        cfg.get("data", {}).pop("test_manifest", None)
    run_cfg = build_run_config(cfg, overrides)
    report = run_pipeline(run_cfg, log=lambda msg: print(msg, file=sys.stderr))
    sys.stdout.write(report_table(report))


def cmd_importance(args):
    ranking = feature_importance(TrainedEnsemble.load(args.model))
    width = max(len(k) for k in ranking)
    for name, value in ranking.items():
        print(f"{name.ljust(width)}  {value:.6f}")
    if args.out:
        atomic_write_text(args.out, json.dumps(ranking, indent=2) + "\n")


COMMANDS = {
    "synth": cmd_synth,
    "features": cmd_features,
    "boundary-mask": cmd_boundary_mask,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "run": cmd_run,
    "importance": cmd_importance,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except MapsegError as exc:
        print(f"mapseg {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
