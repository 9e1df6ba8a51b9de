"""Segmentation and training metrics, plus per-task aggregation.

Region score is plain IoU. Boundary IoU compares only the inner bands of
width ``d`` of both masks (see :func:`mapseg.morphology.inner_band`). A task's
*total* is the mean of its mean IoU and mean BIoU; the overall *score* is the
mean of the task totals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from mapseg.errors import ConfigError, DataError, DimensionMismatch
from mapseg.morphology import inner_band

LOGLOSS_EPS = 1e-7


@dataclass(frozen=True)
class EvalConfig:
    biou_d: int = 3
    empty_score: float = 1.0  # both masks empty
    threshold: float = 0.5

    def __post_init__(self):
        if int(self.biou_d) != self.biou_d or self.biou_d < 1:
            raise ConfigError(f"biou_d must be an integer >= 1, got {self.biou_d}")
        if self.empty_score not in (0.0, 1.0):
            raise ConfigError(f"empty_score must be 0 or 1, got {self.empty_score}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")


def _pair(gt, pred):
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise DimensionMismatch(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    return gt.astype(bool), pred.astype(bool)


def iou(gt, pred, empty_score: float = 1.0) -> float:
    g, p = _pair(gt, pred)
    inter = int(np.count_nonzero(g & p))
    union = int(np.count_nonzero(g)) + int(np.count_nonzero(p)) - inter
    if union == 0:
        return float(empty_score)
    return inter / union


def biou(gt, pred, d: int = 3, empty_score: float = 1.0) -> float:
    g, p = _pair(gt, pred)
    return iou(inner_band(g, d).band, inner_band(p, d).band, empty_score)


def binary_logloss(probabilities, labels) -> float:
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise DataError(f"length mismatch: {p.shape} vs {y.shape}")
    p = np.clip(p, LOGLOSS_EPS, 1.0 - LOGLOSS_EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC; tied scores count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise DataError(f"length mismatch: {s.shape} vs {y.shape}")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("auc needs both classes present")
    # average ranks (1-based) for ties
    uniq, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    avg_rank = upper - (counts - 1) / 2.0
    rank_sum = avg_rank[inverse][y].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


@dataclass(frozen=True)
class TileScore:
    id: str
    iou: float
    biou: float


def score_tile(tile_id: str, gt, pred, config: EvalConfig = EvalConfig()) -> TileScore:
    return TileScore(
        tile_id,
        iou(gt, pred, config.empty_score),
        biou(gt, pred, config.biou_d, config.empty_score),
    )


@dataclass(frozen=True)
class TaskResult:
    task: str
    tiles: tuple[TileScore, ...]
    iou: float
    biou: float
    total: float


@dataclass(frozen=True)
class EvalReport:
    tasks: tuple[TaskResult, ...]
    score: float
    config: EvalConfig = EvalConfig()
    meta: Mapping = field(default_factory=dict)

    def task(self, name: str) -> TaskResult:
        for t in self.tasks:
            if t.task == name:
                return t
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            "meta": dict(self.meta),
            "config": {
                "biou_d": self.config.biou_d,
                "empty_score": self.config.empty_score,
                "threshold": self.config.threshold,
            },
            "tasks": [
                {
                    "task": t.task,
                    "iou": t.iou,
                    "biou": t.biou,
                    "total": t.total,
                    "tiles": [{"id": s.id, "iou": s.iou, "biou": s.biou} for s in t.tiles],
                }
                for t in self.tasks
            ],
            "score": self.score,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, payload: Mapping) -> "EvalReport":
        cfg = EvalConfig(**payload.get("config", {}))
        tasks = tuple(
            TaskResult(
                t["task"],
                tuple(TileScore(s["id"], s["iou"], s["biou"]) for s in t["tiles"]),
                t["iou"],
                t["biou"],
                t["total"],
            )
            for t in payload["tasks"]
        )
        return cls(tasks, payload["score"], cfg, payload.get("meta", {}))


def _as_scores(pairs: Iterable) -> tuple[TileScore, ...]:
    out = []
    for i, p in enumerate(pairs):
        if isinstance(p, TileScore):
            out.append(p)
        elif len(p) == 3:
            out.append(TileScore(str(p[0]), float(p[1]), float(p[2])))
        else:
            out.append(TileScore(str(i), float(p[0]), float(p[1])))
    return tuple(out)


def aggregate(
    task1: Sequence | None = None,
    task2: Sequence | None = None,
    config: EvalConfig = EvalConfig(),
    meta: Mapping | None = None,
) -> EvalReport:
    """Per-task means and totals, and the mean of totals as the score.

    ``task1``/``task2`` are sequences of :class:`TileScore`, ``(id, iou, biou)``
    or ``(iou, biou)``; either may be omitted but not both.
    """
    results = []
    for name, pairs in (("task1", task1), ("task2", task2)):
        if pairs is None:
            continue
        scores = _as_scores(pairs)
        if not scores:
            raise DataError(f"{name}: no tiles to aggregate")
        mean_iou = float(np.mean([s.iou for s in scores]))
        mean_biou = float(np.mean([s.biou for s in scores]))
        results.append(TaskResult(name, scores, mean_iou, mean_biou, (mean_iou + mean_biou) / 2.0))
    if not results:
        raise DataError("aggregate needs at least one task")
    score = float(np.mean([r.total for r in results]))
    return EvalReport(tuple(results), score, config, dict(meta or {}))


TABLE_COLUMNS = ("Classifier", "Features", "Images", "BMask", "Task", "IoU", "BIoU", "Total")


def format_table(rows: Sequence[Mapping]) -> str:
    """Aligned plain-text table; numeric cells printed with 4 decimals."""
    cells = [list(TABLE_COLUMNS)]
    for row in rows:
        line = []
        for col in TABLE_COLUMNS:
            v = row.get(col, "")
            line.append(f"{v:.4f}" if isinstance(v, float) else str(v))
        cells.append(line)
    widths = [max(len(r[i]) for r in cells) for i in range(len(TABLE_COLUMNS))]
    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    out = [sep]
    for k, r in enumerate(cells):
        out.append("| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |")
        if k == 0:
            out.append(sep)
    out.append(sep)
    return "\n".join(out) + "\n"


def report_table(report: EvalReport) -> str:
    meta = report.meta
    rows = [
        {
            "Classifier": meta.get("classifier", ""),
            "Features": meta.get("features", ""),
            "Images": meta.get("images", ""),
            "BMask": "Yes" if meta.get("bmask") else "No",
            "Task": t.task,
            "IoU": t.iou,
            "BIoU": t.biou,
            "Total": t.total,
        }
        for t in report.tasks
    ]
    return format_table(rows) + f"Score: {report.score:.4f}\n"
