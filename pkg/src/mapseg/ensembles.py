"""Random forest, level-wise gradient boosting and leaf-wise histogram boosting.

All three learners share :mod:`mapseg.trees`. The forest averages leaf class-1
fractions of Gini trees; the boosters add ``learning_rate * tree`` to a
log-odds base score and predict ``sigmoid`` of the sum.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from mapseg.errors import ConfigError, DataError, TrainingDivergence
from mapseg.metrics import auc, binary_logloss
from mapseg.raster_io import atomic_write_text
from mapseg.trees import GradGain, Gini, LeafWise, LevelWise, Targets, Tree, build_bins, grad_hess, grow_tree

SCHEMA_VERSION = 1
KINDS = ("rf", "gbdt", "lgbm")
TRAINING_METRICS = ("auc", "binary_logloss")
BASE_SCORE_CLAMP = 10.0
PROB_CLAMP = 1e-15


@dataclass(frozen=True)
class LearnerConfig:
    """Hyperparameters for one learner. Use :meth:`for_kind` to get the kind's defaults."""

    kind: str = "lgbm"
    seed: int = 0
    threshold: float = 0.5
    max_bins: int = 256
    # forest
    n_estimators: int = 10
    bootstrap: bool = True
    max_features: str | int = "sqrt"
    # boosting (max_depth also caps forest trees)
    learning_rate: float = 0.05
    n_rounds: int = 100
    max_depth: int | None = 10
    num_leaves: int = 100
    colsample_bytree: float = 1.0
    gamma: float = 0.0
    min_child_weight: float = 1e-3
    reg_alpha: float = 0.0
    reg_lambda: float = 0.0
    metrics: tuple[str, ...] = TRAINING_METRICS

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown learner kind {self.kind!r}; choose from {', '.join(KINDS)}")
        object.__setattr__(self, "metrics", tuple(self.metrics))
        unknown = [m for m in self.metrics if m not in TRAINING_METRICS]
        if unknown:
            raise ConfigError(f"unknown training metrics {unknown}")
        if not 0.0 < self.learning_rate <= 1.0:
            raise ConfigError(f"learning_rate must lie in (0, 1], got {self.learning_rate}")
        if not 0.0 < self.colsample_bytree <= 1.0:
            raise ConfigError(f"colsample_bytree must lie in (0, 1], got {self.colsample_bytree}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        for key in ("n_estimators", "n_rounds", "num_leaves"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1, got {getattr(self, key)}")
        if self.max_depth is not None and self.max_depth < 1:
            raise ConfigError(f"max_depth must be >= 1 or None, got {self.max_depth}")
        if isinstance(self.max_features, str) and self.max_features not in ("sqrt", "all"):
            raise ConfigError(f"max_features must be 'sqrt', 'all' or an int, got {self.max_features!r}")
        for key in ("gamma", "min_child_weight", "reg_alpha", "reg_lambda"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative")

    @classmethod
    def for_kind(cls, kind: str, **overrides) -> "LearnerConfig":
        if kind not in KINDS:
            raise ConfigError(f"unknown learner kind {kind!r}; choose from {', '.join(KINDS)}")
        base = dict(_DEFAULTS[kind])
        names = {f.name for f in fields(cls)}
        bad = set(overrides) - names
        if bad:
            raise ConfigError(f"unknown learner options {sorted(bad)}")
        base.update(overrides)
        return cls(kind=kind, **base)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["metrics"] = list(self.metrics)
        return out

    @classmethod
    def from_dict(cls, payload: dict) -> "LearnerConfig":
        return cls(**payload)


_DEFAULTS = {
    "rf": dict(n_estimators=10, bootstrap=True, max_features="sqrt", max_depth=None),
    "gbdt": dict(
        learning_rate=0.3,
        n_rounds=100,
        max_depth=8,
        colsample_bytree=0.9,
        gamma=8.3,
        min_child_weight=5.0,
        reg_alpha=177.0,
        reg_lambda=0.04,
        metrics=("binary_logloss",),
    ),
    "lgbm": dict(
        learning_rate=0.05,
        n_rounds=100,
        num_leaves=100,
        max_depth=10,
        min_child_weight=1e-3,
        metrics=("auc", "binary_logloss"),
    ),
}


@dataclass(eq=False)
class TrainedEnsemble:
    kind: str
    feature_names: tuple[str, ...]
    trees: list[Tree]
    base_score: float = 0.0
    learning_rate: float = 1.0
    threshold: float = 0.5
    config: dict = field(default_factory=dict)
    metric_trace: dict = field(default_factory=dict)

    def raw_score(self, X) -> np.ndarray:
        X = np.asarray(X)
        if self.kind == "rf":
            acc = np.zeros(X.shape[0])
            for tree in self.trees:
                acc += tree.predict(X)
            return acc / len(self.trees)
        acc = np.full(X.shape[0], self.base_score, dtype=np.float64)
        for tree in self.trees:
            acc += self.learning_rate * tree.predict(X)
        return acc

    def predict_proba(self, X) -> np.ndarray:
        raw = self.raw_score(X)
        if self.kind == "rf":
            return raw
        return _sigmoid(raw)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "kind": self.kind,
            "feature_names": list(self.feature_names),
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "threshold": self.threshold,
            "trees": [t.to_dict() for t in self.trees],
            "config": self.config,
            "metric_trace": self.metric_trace,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":")) + "\n"

    @classmethod
    def from_dict(cls, payload: dict) -> "TrainedEnsemble":
        version = payload.get("schema_version")
        if version != SCHEMA_VERSION:
            raise DataError(f"unsupported model schema_version {version!r} (expected {SCHEMA_VERSION})")
        return cls(
            kind=payload["kind"],
            feature_names=tuple(payload["feature_names"]),
            trees=[Tree.from_dict(t) for t in payload["trees"]],
            base_score=payload["base_score"],
            learning_rate=payload["learning_rate"],
            threshold=payload["threshold"],
            config=payload.get("config", {}),
            metric_trace=payload.get("metric_trace", {}),
        )

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path) -> "TrainedEnsemble":
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise DataError(f"model file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise DataError(f"model file {path} is not valid JSON: {exc}") from None
        return cls.from_dict(payload)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def _xy(matrix):
    X = np.asarray(matrix.values)
    y = np.asarray(matrix.labels, dtype=np.float64)
    if X.shape[0] == 0:
        raise DataError("training matrix is empty")
    if not np.isin(y, (0.0, 1.0)).all():
        raise DataError("labels must be binary")
    if y.min() == y.max():
        raise DataError(f"training labels are all {int(y[0])}; a single-class model is degenerate")
    return X, y


def _n_threads() -> int:
    raw = os.environ.get("MAPSEG_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ConfigError(f"MAPSEG_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def train_random_forest(matrix, config: LearnerConfig | None = None) -> TrainedEnsemble:
    """Bagged Gini trees with a random feature subset drawn at every split.

    Tree ``i`` uses its own generator spawned from ``config.seed``, so results
    do not depend on the number of worker threads.
    """
    config = config or LearnerConfig.for_kind("rf")
    X, y = _xy(matrix)
    n, n_feat = X.shape
    bins = build_bins(X, config.max_bins)
    codes = bins.transform(X)
    if config.max_features == "sqrt":
        per_split = math.ceil(math.sqrt(n_feat))
    elif config.max_features == "all":
        per_split = None
    else:
        per_split = int(config.max_features)
        if per_split < 1:
            raise ConfigError("max_features must be >= 1")
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_estimators)

    def fit_one(seed_seq):
        rng = np.random.default_rng(seed_seq)
        if config.bootstrap:
            weight = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(np.float64)
        else:
            weight = np.ones(n)
        rows = np.flatnonzero(weight)
        return grow_tree(
            codes, bins, rows, Targets.for_gini(y, weight), Gini(), LevelWise(config.max_depth),
            features_per_split=per_split, rng=rng,
        )

    workers = min(_n_threads(), config.n_estimators)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            trees = list(pool.map(fit_one, seeds))
    else:
        trees = [fit_one(s) for s in seeds]
    return TrainedEnsemble(
        "rf", tuple(matrix.columns), trees, 0.0, 1.0, config.threshold, config.to_dict(), {}
    )


def _boost(matrix, config: LearnerConfig, growth, colsample: float) -> TrainedEnsemble:
    X, y = _xy(matrix)
    n, n_feat = X.shape
    bins = build_bins(X, config.max_bins)
    codes = bins.transform(X)
    rows = np.arange(n)
    rng = np.random.default_rng(config.seed)
    criterion = GradGain(config.reg_lambda, config.reg_alpha, config.gamma, config.min_child_weight)
    mean = y.mean()
    base = float(np.clip(math.log(mean / (1.0 - mean)), -BASE_SCORE_CLAMP, BASE_SCORE_CLAMP))
    raw = np.full(n, base)
    n_cols = math.ceil(colsample * n_feat)
    trace = {m: [] for m in config.metrics}
    trees = []
    for r in range(config.n_rounds):
        p = np.clip(_sigmoid(raw), PROB_CLAMP, 1.0 - PROB_CLAMP)
        g, h = grad_hess(p, y)
        feats = None
        if n_cols < n_feat:
            feats = np.sort(rng.choice(n_feat, size=n_cols, replace=False))
        tree = grow_tree(codes, bins, rows, Targets.for_grad(g, h), criterion, growth, feats)
        trees.append(tree)
        raw = raw + config.learning_rate * tree.predict(X)
        prob = _sigmoid(raw)
        loss = binary_logloss(prob, y)
        if not (np.isfinite(loss) and np.isfinite(raw).all()):
            raise TrainingDivergence(f"non-finite training loss at round {r}", r)
        if "binary_logloss" in trace:
            trace["binary_logloss"].append(loss)
        if "auc" in trace:
            trace["auc"].append(auc(prob, y))
    return TrainedEnsemble(
        config.kind, tuple(matrix.columns), trees, base, config.learning_rate,
        config.threshold, config.to_dict(), trace,
    )


def train_gbdt(matrix, config: LearnerConfig | None = None) -> TrainedEnsemble:
    """Level-wise regularised boosting with per-tree column sampling."""
    config = config or LearnerConfig.for_kind("gbdt")
    return _boost(matrix, config, LevelWise(config.max_depth), config.colsample_bytree)


def train_lgbm(matrix, config: LearnerConfig | None = None) -> TrainedEnsemble:
    """Leaf-wise boosting: always split the leaf with the largest gain, up to ``num_leaves``."""
    config = config or LearnerConfig.for_kind("lgbm")
    return _boost(matrix, config, LeafWise(config.num_leaves, config.max_depth), config.colsample_bytree)


_TRAINERS = {"rf": train_random_forest, "gbdt": train_gbdt, "lgbm": train_lgbm}


def train(matrix, config: LearnerConfig) -> TrainedEnsemble:
    return _TRAINERS[config.kind](matrix, config)


def _check_names(model: TrainedEnsemble, names: Sequence[str]) -> None:
    if tuple(names) != tuple(model.feature_names):
        raise DataError(
            f"feature mismatch: model expects {list(model.feature_names)}, got {list(names)}"
        )


def predict_mask(model: TrainedEnsemble, features: np.ndarray, feature_names: Sequence[str], threshold: float | None = None):
    """Classify every pixel of an ``(H, W, F)`` feature stack.

    Returns ``(mask, probability)``; a pixel is 1 iff its probability is
    ``>= threshold`` (model threshold by default).
    """
    _check_names(model, feature_names)
    features = np.asarray(features)
    if features.ndim != 3 or features.shape[2] != len(feature_names):
        raise DataError(f"expected an (H, W, {len(feature_names)}) feature stack, got {features.shape}")
    h, w, f = features.shape
    threshold = model.threshold if threshold is None else threshold
    prob = model.predict_proba(features.reshape(h * w, f)).reshape(h, w)
    return (prob >= threshold).astype(np.uint8), prob


def feature_importance(model: TrainedEnsemble) -> dict[str, float]:
    """Normalised gain importance, sorted descending.

    Forest splits contribute their Gini decrease weighted by the node's share
    of the tree's (bootstrap) sample weight; boosting splits contribute their
    regularised gain.
    """
    imp = np.zeros(len(model.feature_names))
    for tree in model.trees:
        inner = tree.feature >= 0
        if not inner.any():
            continue
        contrib = tree.gain[inner]
        if model.kind == "rf":
            contrib = contrib * tree.cover[inner] / tree.cover[0]
        np.add.at(imp, tree.feature[inner], contrib)
    total = imp.sum()
    if total <= 0:
        raise DataError("model has no internal nodes; importance is undefined")
    imp = imp / total
    order = sorted(range(len(imp)), key=lambda i: (-imp[i], i))
    return {model.feature_names[i]: float(imp[i]) for i in order}
