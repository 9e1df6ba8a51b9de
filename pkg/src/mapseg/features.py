"""Per-pixel features and the flattened training matrix.

A tile becomes an ``(H, W, F)`` stack of feature planes; stacking the planes
of many tiles row-major gives the design matrix the tree learners consume.
With boundary duplication every tile contributes a second block of identical
feature rows labelled with its boundary mask instead of the full mask.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import cv2
import numpy as np

from mapseg.errors import ConfigError, DataError
from mapseg.morphology import StructuringElement, boundary_mask
from mapseg.raster_io import Task, Tile, atomic_write_bytes

CHANNEL_KINDS = ("blue", "green", "red", "gray", "lidar")
FILTER_KINDS = ("histeq", "clahe", "morph", "gabor", "canny")
FEATURE_KINDS = CHANNEL_KINDS + FILTER_KINDS

# RGB order of decoded images; blue/green/red names are mapped from it
_CHANNEL_INDEX = {"red": 0, "green": 1, "blue": 2}

DEFAULT_FILTER_PARAMS = {
    "histeq": {},
    "clahe": {"clip_limit": 2.0, "tiles": 8},
    "morph": {"size": 3},
    "gabor": {"wavelength": 8.0, "sigma": 4.0, "orientations": (0.0, 45.0, 90.0, 135.0), "aspect": 0.5},
    "canny": {"low": 50.0, "high": 150.0},
}

PRESETS = {
    "task1": ("blue", "green", "red", "gray"),
    "task2": ("blue", "green", "red", "gray", "lidar"),
    # gradient boosting did better without the gray plane
    "bgr": ("blue", "green", "red"),
    "bgr-lidar": ("blue", "green", "red", "lidar"),
}


@dataclass(frozen=True)
class FeatureSpec:
    kinds: tuple[str, ...] = PRESETS["task1"]
    params: Mapping[str, Mapping] = field(default_factory=dict)

    def __post_init__(self):
        kinds = tuple(self.kinds)
        if not kinds:
            raise ConfigError("feature spec is empty")
        unknown = [k for k in kinds if k not in FEATURE_KINDS]
        if unknown:
            raise ConfigError(f"unknown feature kinds {unknown}; choose from {', '.join(FEATURE_KINDS)}")
        if len(set(kinds)) != len(kinds):
            raise ConfigError(f"duplicate feature kinds in {kinds}")
        bad = [k for k in self.params if k not in FILTER_KINDS]
        if bad:
            raise ConfigError(f"parameters given for non-filter features {bad}")
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "params", {k: dict(v) for k, v in self.params.items()})

    @classmethod
    def parse(cls, text: str, params: Mapping[str, Mapping] | None = None) -> "FeatureSpec":
        text = text.strip()
        if text in PRESETS:
            kinds = PRESETS[text]
        else:
            kinds = tuple(k.strip().lower() for k in text.split(",") if k.strip())
        return cls(kinds, params or {})

    @classmethod
    def for_task(cls, task) -> "FeatureSpec":
        return cls(PRESETS[Task.parse(task).value])

    @property
    def uses_lidar(self) -> bool:
        return "lidar" in self.kinds

    def check_task(self, task) -> None:
        task = Task.parse(task)
        if self.uses_lidar and task is Task.task1:
            raise ConfigError("task 1 is aerial-only; remove 'lidar' from the feature spec")
        if not self.uses_lidar and task is Task.task2:
            raise ConfigError("task 2 requires 'lidar' in the feature spec")

    def filter_params(self, kind: str) -> dict:
        merged = dict(DEFAULT_FILTER_PARAMS[kind])
        merged.update(self.params.get(kind, {}))
        return merged

    def __str__(self):
        return ",".join(self.kinds)


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    name: str
    values: np.ndarray


def split_channels(tile: Tile) -> list[FeatureGrid]:
    """Blue, green and red planes (in that order) as float32 grids."""
    return [
        FeatureGrid(name, tile.rgb[:, :, _CHANNEL_INDEX[name]].astype(np.float32))
        for name in ("blue", "green", "red")
    ]


def _gray_u8(tile: Tile) -> np.ndarray:
    rgb = tile.rgb.astype(np.float64)
    luma = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    return np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)


def to_gray(tile: Tile) -> FeatureGrid:
    """Luma ``round(0.299 R + 0.587 G + 0.114 B)``, halves rounded up."""
    return FeatureGrid("gray", _gray_u8(tile).astype(np.float32))


def _histeq(gray: np.ndarray) -> np.ndarray:
    hist = np.bincount(gray.ravel(), minlength=256)
    cdf = np.cumsum(hist) / gray.size
    lut = np.floor(cdf * 255 + 0.5)
    return lut[gray]


def _clahe(gray, clip_limit, tiles):
    if clip_limit <= 0 or int(tiles) < 1:
        raise ConfigError(f"clahe needs clip_limit > 0 and tiles >= 1, got {clip_limit}, {tiles}")
    clahe = cv2.createCLAHE(clipLimit=float(clip_limit), tileGridSize=(int(tiles), int(tiles)))
    return clahe.apply(gray)


def _morph(gray, size):
    size = int(size)
    if size < 1 or size % 2 == 0:
        raise ConfigError(f"morph element size must be odd and positive, got {size}")
    kernel = np.ones((size, size), np.uint8)
    return cv2.morphologyEx(gray, cv2.MORPH_OPEN, kernel, borderType=cv2.BORDER_REPLICATE)


def _gabor(gray, wavelength, sigma, orientations, aspect):
    if wavelength <= 0 or sigma <= 0 or aspect <= 0:
        raise ConfigError(
            f"gabor wavelength, sigma and aspect must be positive, got {wavelength}, {sigma}, {aspect}"
        )
    if not orientations:
        raise ConfigError("gabor needs at least one orientation")
    ksize = 2 * int(np.ceil(3 * sigma)) + 1
    # kernel is made zero-mean, so filtering the mean-removed image is equivalent
    # and keeps flat regions exactly zero
    img = gray.astype(np.float64)
    img -= img.mean()
    acc = np.zeros_like(img)
    for theta in orientations:
        kernel = cv2.getGaborKernel(
            (ksize, ksize), float(sigma), np.deg2rad(float(theta)), float(wavelength), float(aspect), 0.0,
            ktype=cv2.CV_64F,
        )
        kernel -= kernel.mean()
        acc += np.abs(cv2.filter2D(img, cv2.CV_64F, kernel, borderType=cv2.BORDER_REFLECT))
    return acc / len(orientations)


def _canny(gray, low, high):
    if low < 0 or high < low:
        raise ConfigError(f"canny thresholds need 0 <= low <= high, got {low}, {high}")
    return cv2.Canny(gray, float(low), float(high))


_FILTERS = {"histeq": _histeq, "clahe": _clahe, "morph": _morph, "gabor": _gabor, "canny": _canny}


def extract_filter_feature(tile: Tile, kind: str, params: Mapping | None = None) -> FeatureGrid:
    """Apply one of the gray-image filters; ``params`` override the defaults."""
    if kind not in _FILTERS:
        raise ConfigError(f"unknown filter {kind!r}; choose from {', '.join(FILTER_KINDS)}")
    merged = dict(DEFAULT_FILTER_PARAMS[kind])
    unknown = set(params or {}) - set(merged)
    if unknown:
        raise ConfigError(f"unknown {kind} parameters: {sorted(unknown)}")
    merged.update(params or {})
    values = _FILTERS[kind](_gray_u8(tile), **merged)
    return FeatureGrid(kind, np.asarray(values, dtype=np.float32))


def feature_grids(tile: Tile, spec: FeatureSpec) -> list[FeatureGrid]:
    grids = {}
    if any(k in spec.kinds for k in ("blue", "green", "red")):
        grids.update({g.name: g for g in split_channels(tile)})
    if "gray" in spec.kinds:
        grids["gray"] = to_gray(tile)
    if "lidar" in spec.kinds:
        if tile.lidar is None:
            raise DataError(f"tile {tile.id}: feature spec includes lidar but the tile has none")
        grids["lidar"] = FeatureGrid("lidar", tile.lidar.astype(np.float32))
    for kind in spec.kinds:
        if kind in FILTER_KINDS:
            grids[kind] = extract_filter_feature(tile, kind, spec.params.get(kind))
    return [grids[k] for k in spec.kinds]


def tile_features(tile: Tile, spec: FeatureSpec) -> np.ndarray:
    """``(H, W, F)`` float32 stack in spec order."""
    return np.stack([g.values for g in feature_grids(tile, spec)], axis=-1)


ORIGINAL, BOUNDARY = 0, 1

_MAGIC = b"MSFM"
_VERSION = 1


@dataclass(eq=False)
class FeatureMatrix:
    """Flattened pixel rows with labels.

    ``provenance`` (when present) maps each row back to
    ``(tile_ids[tile_index], pixel_row, pixel_col, variant)``. It is not
    persisted by :meth:`save`.
    """

    columns: tuple[str, ...]
    values: np.ndarray  # (N, F) float32
    labels: np.ndarray  # (N,) uint8
    tile_ids: tuple[str, ...] = ()
    tile_index: np.ndarray | None = None
    pixel_row: np.ndarray | None = None
    pixel_col: np.ndarray | None = None
    variant: np.ndarray | None = None
    shapes: dict = field(default_factory=dict)

    def __post_init__(self):
        self.columns = tuple(self.columns)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.columns):
            raise DataError(f"values shape {self.values.shape} does not match {len(self.columns)} columns")
        if self.labels.shape != (self.values.shape[0],):
            raise DataError("one label per row required")

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def has_provenance(self) -> bool:
        return self.tile_index is not None

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]

    def grid(self, name: str, tile_id: str, variant: int = ORIGINAL) -> np.ndarray:
        """Reshape one column back to the tile raster using provenance."""
        if not self.has_provenance:
            raise DataError("matrix has no provenance")
        t = self.tile_ids.index(tile_id)
        sel = (self.tile_index == t) & (self.variant == variant)
        out = np.empty(self.shapes[tile_id], dtype=self.values.dtype)
        src = self.labels if name == "label" else self.column(name)
        out[self.pixel_row[sel], self.pixel_col[sel]] = src[sel]
        return out

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        names = list(self.columns) + ["label"]
        buf.write(_MAGIC)
        buf.write(struct.pack("<IQI", _VERSION, self.n_rows, len(names)))
        for name in names:
            raw = name.encode("utf-8")
            buf.write(struct.pack("<H", len(raw)))
            buf.write(raw)
        table = np.empty((self.n_rows, len(names)), dtype="<f4")
        table[:, :-1] = self.values
        table[:, -1] = self.labels
        buf.write(table.tobytes(order="C"))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "FeatureMatrix":
        if data[:4] != _MAGIC:
            raise DataError("not a feature matrix file (bad magic)")
        version, n_rows, n_cols = struct.unpack_from("<IQI", data, 4)
        if version != _VERSION:
            raise DataError(f"unsupported feature matrix version {version}")
        pos = 4 + struct.calcsize("<IQI")
        names = []
        for _ in range(n_cols):
            (length,) = struct.unpack_from("<H", data, pos)
            pos += 2
            names.append(data[pos:pos + length].decode("utf-8"))
            pos += length
        expected = n_rows * n_cols * 4
        if len(data) - pos != expected:
            raise DataError(f"feature matrix payload is {len(data) - pos} bytes, expected {expected}")
        table = np.frombuffer(data, dtype="<f4", offset=pos).reshape(n_rows, n_cols)
        if names[-1] != "label":
            raise DataError("last column of a feature matrix must be 'label'")
        return cls(
            tuple(names[:-1]),
            np.ascontiguousarray(table[:, :-1], dtype=np.float32),
            table[:, -1].astype(np.uint8),
        )

    def save(self, path) -> None:
        atomic_write_bytes(path, self.to_bytes())

    @classmethod
    def load(cls, path) -> "FeatureMatrix":
        try:
            data = Path(path).read_bytes()
        except FileNotFoundError:
            raise DataError(f"feature matrix not found: {path}") from None
        return cls.from_bytes(data)


def assemble_design_matrix(
    tiles: Sequence[Tile],
    spec: FeatureSpec,
    with_boundary: bool = False,
    se=StructuringElement(7),
) -> FeatureMatrix:
    """Stack tiles into one labelled matrix.

    Per tile the block order is: original-mask rows, then (if ``with_boundary``)
    the same feature rows labelled with ``boundary_mask(mask, se)``.
    """
    if not tiles:
        raise DataError("no tiles to assemble")
    blocks, labels, t_idx, rows, cols, variants = [], [], [], [], [], []
    shapes = {}
    for i, tile in enumerate(tiles):
        if tile.mask is None:
            raise DataError(f"tile {tile.id} has no mask; cannot build training rows")
        h, w = tile.shape
        shapes[tile.id] = (h, w)
        feats = tile_features(tile, spec).reshape(h * w, -1)
        rr, cc = np.divmod(np.arange(h * w, dtype=np.int32), w)
        variant_labels = [tile.mask.ravel()]
        if with_boundary:
            variant_labels.append(boundary_mask(tile.mask, se).ravel())
        for v, lab in enumerate(variant_labels):
            blocks.append(feats)
            labels.append(lab.astype(np.uint8))
            t_idx.append(np.full(h * w, i, dtype=np.int32))
            rows.append(rr)
            cols.append(cc)
            variants.append(np.full(h * w, v, dtype=np.uint8))
    return FeatureMatrix(
        spec.kinds,
        np.ascontiguousarray(np.concatenate(blocks), dtype=np.float32),
        np.concatenate(labels),
        tuple(t.id for t in tiles),
        np.concatenate(t_idx),
        np.concatenate(rows),
        np.concatenate(cols),
        np.concatenate(variants),
        shapes,
    )
