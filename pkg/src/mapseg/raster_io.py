"""Loading, validating, tiling and saving aerial images, LiDAR grids and masks.

Everything downstream works on in-memory :class:`Tile` objects, so this is the
only module that knows about file formats.

Formats
-------
* RGB images and masks: 8-bit PNG or TIFF. Decoded files are treated as RGB;
  grayscale files are replicated to three channels.
* LiDAR: single-band TIFF (32-bit float preferred, integer accepted).
* Masks: any nonzero pixel becomes 1.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from PIL import Image

from mapseg.errors import ConfigError, DataError, DimensionMismatch

IMAGE_SUFFIXES = (".png", ".tif", ".tiff")


class Task(str, Enum):
    task1 = "task1"  # aerial only
    task2 = "task2"  # aerial + LiDAR

    @classmethod
    def parse(cls, value) -> "Task":
        if isinstance(value, Task):
            return value
        text = str(value).strip().lower()
        if text in ("1", "task1", "task_1"):
            return cls.task1
        if text in ("2", "task2", "task_2"):
            return cls.task2
        raise ConfigError(f"unknown task {value!r}; expected 1 or 2")


def _readonly(arr: np.ndarray | None) -> np.ndarray | None:
    if arr is None:
        return None
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Tile:
    """One co-registered scene unit.

    ``rgb`` is ``(H, W, 3) uint8``, ``lidar`` is ``(H, W) float32`` and ``mask``
    is ``(H, W) uint8`` with values in {0, 1}. Arrays are made read-only.
    """

    id: str
    rgb: np.ndarray
    lidar: np.ndarray | None = None
    mask: np.ndarray | None = None

    def __post_init__(self):
        rgb = np.asarray(self.rgb)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise DataError(f"tile {self.id}: rgb must be HxWx3, got shape {rgb.shape}")
        if rgb.dtype != np.uint8:
            raise DataError(f"tile {self.id}: rgb must be 8-bit, got {rgb.dtype}")
        shape = rgb.shape[:2]
        lidar = self.lidar
        if lidar is not None:
            lidar = np.asarray(lidar, dtype=np.float32)
            if lidar.shape != shape:
                raise DimensionMismatch(
                    f"tile {self.id}: lidar shape {lidar.shape} != rgb shape {shape}"
                )
            _check_finite(lidar, self.id)
        mask = self.mask
        if mask is not None:
            mask = np.asarray(mask)
            if mask.shape != shape:
                raise DimensionMismatch(
                    f"tile {self.id}: mask shape {mask.shape} != rgb shape {shape}"
                )
            if not np.isin(mask, (0, 1)).all():
                raise DataError(f"tile {self.id}: mask values must be 0/1")
            mask = mask.astype(np.uint8)
        object.__setattr__(self, "rgb", _readonly(rgb))
        object.__setattr__(self, "lidar", _readonly(lidar))
        object.__setattr__(self, "mask", _readonly(mask))

    @property
    def shape(self) -> tuple[int, int]:
        return self.rgb.shape[:2]


def _check_finite(lidar: np.ndarray, tile_id: str) -> None:
    bad = ~np.isfinite(lidar)
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise DataError(
            f"tile {tile_id}: non-finite LiDAR value {lidar[r, c]} at pixel (row={r}, col={c})"
        )


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    rgb: Path
    lidar: Path | None = None
    mask: Path | None = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    task: Task = Task.task1
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ConfigError(f"duplicate tile ids in manifest: {dupes}")
        if self.task is Task.task2:
            missing = [e.id for e in self.entries if e.lidar is None]
            if missing:
                raise ConfigError(f"task2 manifest entries without lidar: {missing[:5]}")

    def __len__(self):
        return len(self.entries)

    def subset(self, indices: Iterable[int]) -> "DatasetManifest":
        return DatasetManifest(tuple(self.entries[i] for i in indices), self.task, self.root)

    def split(self, train_fraction: float = 0.8) -> tuple["DatasetManifest", "DatasetManifest"]:
        """Split by tile index: the first ``int(n * fraction)`` entries (at least one) train."""
        n_train = int(len(self.entries) * train_fraction)
        n_train = min(max(n_train, 1), len(self.entries))
        return self.subset(range(n_train)), self.subset(range(n_train, len(self.entries)))

    def to_json(self, root: Path | None = None) -> str:
        root = Path(root) if root is not None else self.root

        def rel(p):
            if p is None:
                return None
            p = Path(p)
            try:
                return p.relative_to(root).as_posix()
            except ValueError:
                return str(p)

        payload = {
            "task": self.task.value,
            "entries": [
                {"id": e.id, "rgb": rel(e.rgb), "lidar": rel(e.lidar), "mask": rel(e.mask)}
                for e in self.entries
            ],
        }
        return json.dumps(payload, indent=2) + "\n"


def read_manifest(path, task=None) -> DatasetManifest:
    """Read a JSON manifest. Paths inside are relative to the manifest file."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest {path} is not valid JSON: {exc}") from None
    if isinstance(payload, list):
        raw_entries, raw_task = payload, None
    else:
        raw_entries, raw_task = payload.get("entries", []), payload.get("task")
    root = path.parent
    entries = []
    for raw in raw_entries:
        try:
            entries.append(
                ManifestEntry(
                    id=str(raw["id"]),
                    rgb=root / raw["rgb"],
                    lidar=root / raw["lidar"] if raw.get("lidar") else None,
                    mask=root / raw["mask"] if raw.get("mask") else None,
                )
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed manifest entry {raw!r}: missing {exc}") from None
    if task is None:
        task = raw_task if raw_task is not None else Task.task1
    return DatasetManifest(tuple(entries), Task.parse(task), root)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    atomic_write_text(path, manifest.to_json(path.parent))


def scan_directory(root, task=Task.task1) -> DatasetManifest:
    """Build a manifest from the ``images/``, ``lidar/``, ``masks/`` folder layout.

    Files are matched by stem. ``lidar/`` is only required for task 2.
    """
    root = Path(root)
    task = Task.parse(task)

    def index(sub):
        folder = root / sub
        if not folder.is_dir():
            return {}
        return {
            p.stem: p
            for p in sorted(folder.iterdir())
            if p.suffix.lower() in IMAGE_SUFFIXES
        }

    images, lidars, masks = index("images"), index("lidar"), index("masks")
    if not images:
        raise ConfigError(f"no images found under {root / 'images'}")
    entries = [
        ManifestEntry(stem, path, lidars.get(stem), masks.get(stem))
        for stem, path in sorted(images.items())
    ]
    return DatasetManifest(tuple(entries), task, root)


def _open(path: Path, what: str, tile_id: str) -> Image.Image:
    if not Path(path).exists():
        raise DataError(f"tile {tile_id}: {what} file not found: {path}")
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:  # PIL raises a zoo of exception types
        raise DataError(f"tile {tile_id}: cannot decode {what} file {path}: {exc}") from None
    return img


def read_rgb(path, tile_id: str = "?") -> np.ndarray:
    img = _open(Path(path), "rgb", tile_id)
    if img.mode not in ("RGB", "RGBA", "L", "P", "LA", "CMYK", "YCbCr"):
        raise DataError(f"tile {tile_id}: rgb file {path} is not 8-bit (mode {img.mode})")
    return np.asarray(img.convert("RGB"), dtype=np.uint8)


def read_mask(path, tile_id: str = "?") -> np.ndarray:
    img = _open(Path(path), "mask", tile_id)
    arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr.any(axis=2)
    return (arr != 0).astype(np.uint8)


def read_lidar(path, tile_id: str = "?", fill: float | None = None) -> np.ndarray:
    img = _open(Path(path), "lidar", tile_id)
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise DataError(f"tile {tile_id}: lidar file {path} must be single-band, got shape {arr.shape}")
    arr = arr.astype(np.float32)
    if fill is not None:
        arr = np.where(np.isfinite(arr), arr, np.float32(fill))
    _check_finite(arr, tile_id)
    return arr


def load_tile(entry: ManifestEntry, lidar_fill: float | None = None, with_lidar: bool = True) -> Tile:
    """Decode one manifest entry into a validated :class:`Tile`.

    ``lidar_fill`` replaces NaN/inf LiDAR cells before validation; without it
    such cells are rejected with their pixel coordinate.
    """
    rgb = read_rgb(entry.rgb, entry.id)
    lidar = None
    if with_lidar and entry.lidar is not None:
        lidar = read_lidar(entry.lidar, entry.id, lidar_fill)
    mask = read_mask(entry.mask, entry.id) if entry.mask is not None else None
    return Tile(entry.id, rgb, lidar, mask)


def load_tiles(manifest: DatasetManifest, lidar_fill: float | None = None) -> list[Tile]:
    with_lidar = manifest.task is Task.task2
    return [load_tile(e, lidar_fill, with_lidar) for e in manifest.entries]


def tile_grid(scene: Tile, tile_size: int = 500) -> list[Tile]:
    """Cut a scene into ``tile_size`` squares in row-major order.

    Tile ids are ``{scene.id}_{row}_{col}`` in tile units.
    """
    if tile_size < 1:
        raise ConfigError(f"tile_size must be positive, got {tile_size}")
    h, w = scene.shape
    if h % tile_size or w % tile_size:
        raise DimensionMismatch(
            f"scene {scene.id} of size {h}x{w} is not divisible by tile size {tile_size}"
        )
    tiles = []
    for i in range(h // tile_size):
        rs = slice(i * tile_size, (i + 1) * tile_size)
        for j in range(w // tile_size):
            cs = slice(j * tile_size, (j + 1) * tile_size)
            tiles.append(
                Tile(
                    f"{scene.id}_{i}_{j}",
                    scene.rgb[rs, cs],
                    None if scene.lidar is None else scene.lidar[rs, cs],
                    None if scene.mask is None else scene.mask[rs, cs],
                )
            )
    return tiles


def mosaic(tiles: Sequence[Tile], n_rows: int, n_cols: int, scene_id: str = "scene") -> Tile:
    """Inverse of :func:`tile_grid`: concatenate row-major tiles back into a scene."""
    if len(tiles) != n_rows * n_cols:
        raise DimensionMismatch(f"expected {n_rows * n_cols} tiles, got {len(tiles)}")

    def stitch(get):
        parts = [get(t) for t in tiles]
        if any(p is None for p in parts):
            return None
        rows = [np.concatenate(parts[i * n_cols:(i + 1) * n_cols], axis=1) for i in range(n_rows)]
        return np.concatenate(rows, axis=0)

    return Tile(
        scene_id,
        stitch(lambda t: t.rgb),
        stitch(lambda t: t.lidar),
        stitch(lambda t: t.mask),
    )


def _atomic_write(path: Path, write: Callable[[str], None]) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=path.suffix)
        os.close(fd)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None
    try:
        write(tmp)
        os.replace(tmp, path)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc}") from None
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)


def atomic_write_bytes(path, data: bytes) -> None:
    def write(tmp):
        with open(tmp, "wb") as fh:
            fh.write(data)

    _atomic_write(Path(path), write)


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _format_for(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix == ".png":
        return "PNG"
    if suffix in (".tif", ".tiff"):
        return "TIFF"
    raise ConfigError(f"unsupported raster extension {path.suffix!r}; use .png or .tif")


def save_mask(mask: np.ndarray, path) -> None:
    """Write a binary mask as an 8-bit 0/255 image (lossless)."""
    path = Path(path)
    mask = np.asarray(mask)
    if mask.ndim != 2 or not np.isin(mask, (0, 1)).all():
        raise DataError(f"save_mask expects a 2-D 0/1 array, got shape {mask.shape}")
    img = Image.fromarray((mask.astype(np.uint8) * 255), mode="L")
    fmt = _format_for(path)
    _atomic_write(path, lambda tmp: img.save(tmp, format=fmt))


def save_rgb(rgb: np.ndarray, path) -> None:
    path = Path(path)
    img = Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB")
    fmt = _format_for(path)
    _atomic_write(path, lambda tmp: img.save(tmp, format=fmt))


def save_lidar(lidar: np.ndarray, path) -> None:
    """Write a LiDAR grid as a single-band 32-bit float TIFF."""
    path = Path(path)
    if _format_for(path) != "TIFF":
        raise ConfigError("LiDAR grids are stored as .tif")
    img = Image.fromarray(np.asarray(lidar, dtype=np.float32), mode="F")
    _atomic_write(path, lambda tmp: img.save(tmp, format="TIFF"))
