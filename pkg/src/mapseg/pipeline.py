"""End-to-end workflow: extract -> train -> predict -> evaluate.

Each stage is a plain function so the CLI subcommands and :func:`run_pipeline`
share one code path; composing the stages by hand writes the same bytes as a
single run.

Run layout under ``out_dir``::

    matrix.bin     design matrix (features + label)
    model.json     trained ensemble
    pred/<id>.png  predicted masks for the test tiles
    report.json    machine-readable evaluation
    report.txt     aligned table
    FAILED         only present after a failed run: "<stage>: <cause>"
"""

from __future__ import annotations

import copy
import sys
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from mapseg.ensembles import LearnerConfig, TrainedEnsemble, predict_mask, train
from mapseg.errors import ConfigError, DataError, MapsegError
from mapseg.features import FeatureMatrix, FeatureSpec, assemble_design_matrix, tile_features
from mapseg.metrics import EvalConfig, EvalReport, aggregate, report_table, score_tile
from mapseg.morphology import StructuringElement
from mapseg.raster_io import (
    IMAGE_SUFFIXES,
    DatasetManifest,
    Task,
    atomic_write_text,
    load_tile,
    read_manifest,
    read_mask,
    save_lidar,
    save_mask,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

TRAIN_FRACTION = 0.8
FAILED_MARKER = "FAILED"


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class RunConfig:
    task: Task
    out_dir: Path
    features: FeatureSpec
    learner: LearnerConfig
    eval: EvalConfig = EvalConfig()
    manifest: Path | None = None
    train_manifest: Path | None = None
    test_manifest: Path | None = None
    boundary_mask: bool = False
    kernel: int = 7
    lidar_fill: float | None = None

    def __post_init__(self):
        self.features.check_task(self.task)
        StructuringElement(self.kernel)
        if self.manifest is None and (self.train_manifest is None or self.test_manifest is None):
            raise ConfigError("give either manifest, or both train_manifest and test_manifest")
        for p in (self.manifest, self.train_manifest, self.test_manifest):
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"manifest not found: {p}")

    @property
    def seed(self) -> int:
        return self.learner.seed

    def manifests(self) -> tuple[DatasetManifest, DatasetManifest]:
        if self.manifest is not None:
            train_m, test_m = read_manifest(self.manifest, self.task).split(TRAIN_FRACTION)
        else:
            train_m = read_manifest(self.train_manifest, self.task)
            test_m = read_manifest(self.test_manifest, self.task)
        if not len(test_m):
            raise ConfigError("test split is empty; supply more tiles or a test manifest")
        return train_m, test_m


def load_config(path) -> dict:
    """Read a TOML run config. Relative paths in ``[data]`` resolve against the file."""
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from None
    unknown = set(raw) - {"data", "features", "model", "eval"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    data = dict(raw.get("data", {}))
    for key in ("manifest", "train_manifest", "test_manifest", "out"):
        if key in data:
            data[key] = str(path.parent / data[key])
    raw["data"] = data
    return raw


def _merge(base: Mapping, overrides: Mapping) -> dict:
    out = {k: dict(v) if isinstance(v, Mapping) else v for k, v in base.items()}
    for section, values in overrides.items():
        target = out.setdefault(section, {})
        for k, v in values.items():
            if v is not None:
                target[k] = v
    return out


def build_run_config(config: Mapping | None = None, overrides: Mapping | None = None) -> RunConfig:
    """Assemble a :class:`RunConfig` from config sections plus flag overrides.

    Both arguments map section name to key/value pairs; ``None`` override
    values are ignored so unset flags keep the config value.
    """
    merged = _merge(config or {}, overrides or {})
    data = dict(merged.get("data", {}))
    feats = dict(merged.get("features", {}))
    model = dict(merged.get("model", {}))
    ev = dict(merged.get("eval", {}))

    if "task" not in data:
        raise ConfigError("task is required ([data] task = 1 or 2, or --task)")
    task = Task.parse(data.pop("task"))
    if "out" not in data:
        raise ConfigError("output directory is required ([data] out, or --out)")
    out_dir = Path(data.pop("out"))
    paths = {}
    for k in ("manifest", "train_manifest", "test_manifest"):
        v = data.pop(k, None)
        paths[k] = Path(v) if v is not None else None
    lidar_fill = data.pop("lidar_fill", None)
    if data:
        raise ConfigError(f"unknown [data] keys {sorted(data)}")

    spec_text = feats.pop("spec", None)
    params = feats.pop("params", {})
    spec = FeatureSpec.parse(spec_text, params) if spec_text else FeatureSpec(FeatureSpec.for_task(task).kinds, params)
    bmask = bool(feats.pop("boundary_mask", False))
    kernel = int(feats.pop("kernel", 7))
    if feats:
        raise ConfigError(f"unknown [features] keys {sorted(feats)}")

    kind = model.pop("kind", "lgbm")
    if "seed" not in model:
        raise ConfigError("seed is required ([model] seed, or --seed)")
    try:
        learner = LearnerConfig.for_kind(kind, **model)
    except TypeError as exc:
        raise ConfigError(f"bad [model] options: {exc}") from None

    try:
        eval_cfg = EvalConfig(**ev)
    except TypeError as exc:
        raise ConfigError(f"bad [eval] options: {exc}") from None

    return RunConfig(
        task=task,
        out_dir=out_dir,
        features=spec,
        learner=learner,
        eval=eval_cfg,
        boundary_mask=bmask,
        kernel=kernel,
        lidar_fill=None if lidar_fill is None else float(lidar_fill),
        **paths,
    )


# ---------------------------------------------------------------- stages


def _load(manifest: DatasetManifest, spec: FeatureSpec, lidar_fill=None):
    return [load_tile(e, lidar_fill, with_lidar=spec.uses_lidar) for e in manifest.entries]


def extract_features(
    manifest: DatasetManifest,
    spec: FeatureSpec,
    boundary: bool = False,
    kernel: int = 7,
    lidar_fill: float | None = None,
) -> FeatureMatrix:
    tiles = _load(manifest, spec, lidar_fill)
    return assemble_design_matrix(tiles, spec, boundary, StructuringElement(kernel))


def train_model(matrix: FeatureMatrix, learner: LearnerConfig, spec: FeatureSpec | None = None) -> TrainedEnsemble:
    model = train(matrix, learner)
    if spec is not None and spec.params:
        # predict needs the filter parameters to rebuild the same planes
        model.config["feature_params"] = {k: dict(v) for k, v in spec.params.items()}
    return model


def model_spec(model: TrainedEnsemble) -> FeatureSpec:
    return FeatureSpec(model.feature_names, model.config.get("feature_params", {}))


def predict_tiles(
    model: TrainedEnsemble,
    manifest: DatasetManifest,
    out_dir,
    threshold: float | None = None,
    lidar_fill: float | None = None,
    save_prob: bool = False,
) -> list[Path]:
    """Write ``<out_dir>/<id>.png`` for every manifest tile; returns the paths."""
    out_dir = Path(out_dir)
    spec = model_spec(model)
    written = []
    for entry in manifest.entries:
        tile = load_tile(entry, lidar_fill, with_lidar=spec.uses_lidar)
        mask, prob = predict_mask(model, tile_features(tile, spec), spec.kinds, threshold)
        path = out_dir / f"{tile.id}.png"
        save_mask(mask, path)
        if save_prob:
            # float TIFF, same writer as LiDAR grids
            save_lidar(prob.astype(np.float32), out_dir / "prob" / f"{tile.id}.tif")
        written.append(path)
    return written


def _mask_files(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        raise DataError(f"mask directory not found: {folder}")
    return {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def evaluate(
    pred: Mapping[str, Path],
    gt: Mapping[str, Path],
    task="task1",
    config: EvalConfig = EvalConfig(),
    meta: Mapping | None = None,
) -> EvalReport:
    """Score every predicted mask against the ground-truth mask with the same id."""
    if not pred:
        raise DataError("no predicted masks to evaluate")
    missing = sorted(set(pred) - set(gt))
    if missing:
        raise DataError(f"no ground truth for predicted tiles {missing[:5]}")
    scores = [
        score_tile(tid, read_mask(gt[tid], tid), read_mask(pred[tid], tid), config)
        for tid in sorted(pred)
    ]
    task = Task.parse(task).value
    return aggregate(**{task: scores}, config=config, meta=meta)


def evaluate_dirs(pred_dir, gt, task="task1", config: EvalConfig = EvalConfig(), meta=None) -> EvalReport:
    """``gt`` is a mask directory or a manifest (JSON) file."""
    gt = Path(gt)
    if gt.is_file():
        m = read_manifest(gt)
        gt_map = {e.id: e.mask for e in m.entries if e.mask is not None}
    else:
        gt_map = _mask_files(gt)
    return evaluate(_mask_files(Path(pred_dir)), gt_map, task, config, meta)


def report_meta(model: TrainedEnsemble | None = None, images: int | None = None, bmask: bool = False) -> dict:
    meta = {}
    if model is not None:
        meta["classifier"] = model.kind
        meta["features"] = ",".join(model.feature_names)
    if images is not None:
        meta["images"] = int(images)
    meta["bmask"] = bool(bmask)
    return meta


def write_report(report: EvalReport, path) -> None:
    """``path`` gets the JSON form; a sibling ``.txt`` gets the table."""
    path = Path(path)
    atomic_write_text(path, report.to_json())
    atomic_write_text(path.with_suffix(".txt"), report_table(report))


# ---------------------------------------------------------------- run


@contextmanager
def _stage(name: str, out_dir: Path):
    try:
        yield
    except MapsegError as exc:
        try:
            atomic_write_text(out_dir / FAILED_MARKER, f"{name}: {exc}\n")
        except MapsegError:
            pass
        wrapped = copy.copy(exc)
        wrapped.args = (f"stage '{name}' failed: {exc}",)
        wrapped.stage = name
        raise wrapped from exc


def run_pipeline(config: RunConfig, log=None) -> EvalReport:
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / FAILED_MARKER).unlink(missing_ok=True)
    log = log or (lambda msg: None)

    with _stage("load", out):
        train_m, test_m = config.manifests()
    with _stage("features", out):
        matrix = extract_features(train_m, config.features, config.boundary_mask, config.kernel, config.lidar_fill)
        matrix.save(out / "matrix.bin")
        log(f"features: {matrix.n_rows} rows x {len(matrix.columns)} columns")
    with _stage("train", out):
        # train from the persisted bytes so a manual features+train run matches exactly
        model = train_model(FeatureMatrix.load(out / "matrix.bin"), config.learner, config.features)
        model.save(out / "model.json")
        log(f"train: {config.learner.kind}, {len(model.trees)} trees")
    with _stage("predict", out):
        predict_tiles(model, test_m, out / "pred", lidar_fill=config.lidar_fill)
        log(f"predict: {len(test_m)} tiles")
    with _stage("eval", out):
        meta = report_meta(model, len(train_m), config.boundary_mask)
        gt = {e.id: e.mask for e in test_m.entries if e.mask is not None}
        report = evaluate(_mask_files(out / "pred"), gt, config.task, config.eval, meta)
        write_report(report, out / "report.json")
    return report


__all__ = [
    "RunConfig",
    "load_config",
    "build_run_config",
    "extract_features",
    "train_model",
    "model_spec",
    "predict_tiles",
    "evaluate",
    "evaluate_dirs",
    "report_meta",
    "write_report",
    "run_pipeline",
]
