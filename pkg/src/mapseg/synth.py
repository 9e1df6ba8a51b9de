"""Deterministic synthetic aerial + LiDAR scenes with building masks.

Scenes have smooth low-relief terrain, rectangular and L-shaped buildings
that raise the LiDAR grid by a sampled height and recolour the aerial image
with a roof tone (brighter along a 3-pixel parapet rim), optional cast
shadows, and tree canopies.

Shadows darken the ground to the same tone as the darkest roofs but leave
LiDAR at terrain level, so colour alone cannot separate them from roofs while
depth can. Trees are the opposite confounder: elevated like roofs, with
shaded foliage close to the dark roof tones. Building returns bleed onto the
ground cells next to walls (``lidar_mix``), as in rasterised point clouds.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from mapseg.errors import ConfigError
from mapseg.morphology import StructuringElement, boundary_mask, dilate
from mapseg.raster_io import DatasetManifest, ManifestEntry, Task, Tile, save_lidar, save_mask, save_rgb, write_manifest

GROUND_TONES = np.array(
    [
        (72, 112, 54),  # grass
        (84, 84, 90),  # asphalt, close to dark-gray roofs
        (136, 110, 84),  # bare soil
    ],
    dtype=np.float64,
)
SHADOW_TONE = np.array((46, 46, 56), dtype=np.float64)
ROOF_TONES = np.array(
    [
        (156, 64, 52),  # red tile
        (80, 80, 86),  # dark gray
        (150, 148, 146),  # light gray
        SHADOW_TONE,  # shadow-gray, indistinguishable from cast shadow
        (116, 86, 64),  # brown
    ],
    dtype=np.float64,
)
CANOPY_TONE = np.array((50, 54, 52), dtype=np.float64)  # shaded foliage
RIM_GAIN = 1.35
RIM_KERNEL = StructuringElement(7)


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_tiles: int = 20
    size: int = 64
    buildings: tuple[int, int] = (1, 4)
    height: tuple[float, float] = (3.0, 12.0)
    aerial_noise: float = 6.0
    lidar_noise: float = 0.1
    terrain_relief: float = 0.6
    shadow: bool = True
    aerial_blur: float = 0.0  # gaussian sigma in pixels
    lidar_mix: int = 1  # box radius over which building returns bleed onto adjacent ground
    rim_gain: float = RIM_GAIN
    trees: tuple[int, int] = (1, 5)
    tree_height: tuple[float, float] = (3.0, 10.0)

    def __post_init__(self):
        if self.size < 32:
            raise ConfigError(f"synthetic tile size must be >= 32, got {self.size}")
        if self.n_tiles < 1:
            raise ConfigError("n_tiles must be >= 1")
        lo, hi = self.buildings
        if lo < 1 or hi < lo:
            raise ConfigError(f"buildings range must satisfy 1 <= lo <= hi, got {self.buildings}")
        hlo, hhi = self.height
        if hlo <= 0 or hhi < hlo:
            raise ConfigError(f"height range must satisfy 0 < lo <= hi, got {self.height}")
        if min(self.aerial_noise, self.lidar_noise, self.terrain_relief, self.aerial_blur, self.lidar_mix) < 0:
            raise ConfigError("noise and relief must be non-negative")

    @property
    def lidar_noise_bound(self) -> float:
        # noise is clipped at three standard deviations
        return 3.0 * self.lidar_noise


@dataclass(frozen=True, eq=False)
class SynthTile:
    tile: Tile
    terrain: np.ndarray
    shadow: np.ndarray
    roof_tone: np.ndarray  # per-pixel index into ROOF_TONES, -1 off-roof


def _smooth_field(rng, size, n_waves=3):
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((size, size))
    for _ in range(n_waves):
        fx, fy = rng.uniform(0.3, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        out += np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    return out / n_waves


def _footprint(rng, size):
    fp = np.zeros((size, size), dtype=bool)
    lo, hi = 10, max(12, size // 3)
    h, w = rng.integers(lo, hi + 1, size=2)
    r0 = rng.integers(2, size - h - 1)
    c0 = rng.integers(2, size - w - 1)
    fp[r0:r0 + h, c0:c0 + w] = True
    if rng.random() < 0.4:
        # L-shape: a wing hanging off one corner
        wh = rng.integers(7, max(8, h // 2 + 1))
        ww = rng.integers(7, max(8, w // 2 + 1))
        down = r0 + h + wh <= size - 2
        rr = slice(r0 + h, r0 + h + wh) if down else slice(max(1, r0 - wh), r0)
        cc = slice(c0, c0 + ww) if rng.random() < 0.5 else slice(c0 + w - ww, c0 + w)
        fp[rr, cc] = True
    return fp


def synth_tile(rng: np.random.Generator, spec: SynthSpec, tile_id: str) -> SynthTile:
    size = spec.size
    terrain = spec.terrain_relief * _smooth_field(rng, size)
    noise = np.clip(rng.normal(0.0, 1.0, (size, size)), -3, 3) * spec.lidar_noise

    ground_kind = np.digitize(_smooth_field(rng, size), [-0.25, 0.25])
    rgb = GROUND_TONES[ground_kind].copy()

    mask = np.zeros((size, size), dtype=bool)
    # keep buildings and their shadows apart so every footprint is its own component
    reserved = np.zeros((size, size), dtype=bool)
    height = np.zeros((size, size))
    roof_tone = np.full((size, size), -1, dtype=np.int64)
    shadow = np.zeros((size, size), dtype=bool)
    n_buildings = rng.integers(spec.buildings[0], spec.buildings[1] + 1)
    for _ in range(n_buildings):
        for _attempt in range(20):
            fp = _footprint(rng, size)
            if not (fp & reserved).any():
                break
        else:
            continue
        h = rng.uniform(*spec.height)
        tone = rng.integers(len(ROOF_TONES))
        mask |= fp
        height[fp] = h
        roof_tone[fp] = tone
        rim = boundary_mask(fp, RIM_KERNEL).astype(bool)
        rgb[fp] = ROOF_TONES[tone]
        rgb[rim] = np.minimum(ROOF_TONES[tone] * spec.rim_gain, 255.0)
        s = max(2, int(round(h / 3.0)))
        cast = np.zeros_like(fp)
        cast[s:, s:] = fp[:-s, :-s]
        if spec.shadow:
            shadow |= cast
        reserved |= dilate(fp | cast, StructuringElement(5)).astype(bool)
    canopy = np.zeros((size, size), dtype=bool)
    canopy_h = np.zeros((size, size))
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(rng.integers(spec.trees[0], spec.trees[1] + 1)):
        rad = rng.uniform(2.5, 5.0)
        cy, cx = rng.uniform(0, size, size=2)
        blob = ((yy - cy) ** 2 + (xx - cx) ** 2 <= rad * rad) & ~reserved
        canopy_h[blob] = rng.uniform(*spec.tree_height) + rng.normal(0.0, 0.5, blob.sum())
        canopy |= blob
    shadow &= ~mask & ~canopy
    if spec.shadow:
        rgb[shadow] = SHADOW_TONE
    rgb[canopy] = CANOPY_TONE + rng.normal(0.0, 8.0, (int(canopy.sum()), 3))

    if spec.aerial_blur > 0:
        rgb = cv2.GaussianBlur(rgb, (0, 0), spec.aerial_blur, borderType=cv2.BORDER_REFLECT)
    rgb += rng.normal(0.0, spec.aerial_noise, rgb.shape)
    rgb = np.clip(np.rint(rgb), 0, 255).astype(np.uint8)
    if spec.lidar_mix > 0:
        k = 2 * spec.lidar_mix + 1
        # mixed returns raise ground cells next to walls; roofs keep their full height
        height = np.maximum(height, cv2.blur(height, (k, k), borderType=cv2.BORDER_REFLECT))
    lidar = (terrain + np.maximum(height, canopy_h) + noise).astype(np.float32)
    return SynthTile(Tile(tile_id, rgb, lidar, mask.astype(np.uint8)), terrain, shadow, roof_tone)


def generate_tiles(spec: SynthSpec) -> list[SynthTile]:
    rng = np.random.default_rng(spec.seed)
    return [synth_tile(rng, spec, f"synth_{i:04d}") for i in range(spec.n_tiles)]


def synth_dataset(spec: SynthSpec, out_dir, task=Task.task2) -> DatasetManifest:
    """Write tiles under ``images/``, ``lidar/``, ``masks/`` and a ``manifest.json``.

    Also writes ``train.json`` and ``test.json`` (80/20 split by tile index).
    """
    out = Path(out_dir)
    entries = []
    for st in generate_tiles(spec):
        t = st.tile
        rgb_p = out / "images" / f"{t.id}.png"
        lidar_p = out / "lidar" / f"{t.id}.tif"
        mask_p = out / "masks" / f"{t.id}.png"
        save_rgb(t.rgb, rgb_p)
        save_lidar(t.lidar, lidar_p)
        save_mask(t.mask, mask_p)
        entries.append(ManifestEntry(t.id, rgb_p, lidar_p, mask_p))
    manifest = DatasetManifest(tuple(entries), Task.parse(task), out)
    write_manifest(manifest, out / "manifest.json")
    train, test = manifest.split(0.8)
    write_manifest(train, out / "train.json")
    if len(test):
        write_manifest(test, out / "test.json")
    return manifest
