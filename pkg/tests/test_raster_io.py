import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from mapseg.errors import ConfigError, DataError, DimensionMismatch
from mapseg.raster_io import (
    DatasetManifest,
    ManifestEntry,
    Task,
    Tile,
    load_tile,
    load_tiles,
    mosaic,
    read_lidar,
    read_manifest,
    read_mask,
    read_rgb,
    save_lidar,
    save_mask,
    save_rgb,
    scan_directory,
    tile_grid,
    write_manifest,
)


def random_tile(rng, h, w, tile_id="t"):
    return Tile(
        tile_id,
        rng.integers(0, 256, (h, w, 3), dtype=np.uint8),
        rng.normal(0, 5, (h, w)).astype(np.float32),
        (rng.random((h, w)) < 0.3).astype(np.uint8),
    )


def write_triplet(root, tile_id, h=500, w=500, lidar_shape=None, seed=0):
    rng = np.random.default_rng(seed)
    rgb_p, lidar_p, mask_p = root / f"{tile_id}.png", root / f"{tile_id}.tif", root / f"{tile_id}_m.png"
    save_rgb(rng.integers(0, 256, (h, w, 3), dtype=np.uint8), rgb_p)
    save_lidar(rng.normal(0, 1, lidar_shape or (h, w)).astype(np.float32), lidar_p)
    save_mask((rng.random((h, w)) < 0.5).astype(np.uint8), mask_p)
    return ManifestEntry(tile_id, rgb_p, lidar_p, mask_p)


def test_task_parse():
    assert Task.parse(1) is Task.task1
    assert Task.parse("task2") is Task.task2
    with pytest.raises(ConfigError):
        Task.parse(3)


def test_load_full_triplet(tmp_path):
    t = load_tile(write_triplet(tmp_path, "a"))
    assert t.shape == (500, 500)
    assert t.rgb.shape == (500, 500, 3) and t.lidar.shape == (500, 500) and t.mask.shape == (500, 500)
    assert t.lidar.dtype == np.float32 and set(np.unique(t.mask)) <= {0, 1}


def test_lidar_shape_mismatch(tmp_path):
    entry = write_triplet(tmp_path, "a", 40, 40, lidar_shape=(20, 20))
    with pytest.raises(DimensionMismatch):
        load_tile(entry)


def test_mask_0_255_binarised(tmp_path):
    m = np.zeros((8, 8), np.uint8)
    m[2:5, 3:6] = 255
    m[0, 0] = 7
    Image.fromarray(m).save(tmp_path / "m.png")
    got = read_mask(tmp_path / "m.png")
    assert np.array_equal(got, (m != 0).astype(np.uint8))


def test_missing_file_is_data_error(tmp_path):
    with pytest.raises(DataError, match="not found"):
        read_rgb(tmp_path / "nope.png", "x")


def test_nan_lidar_reported_with_pixel(tmp_path):
    grid = np.zeros((6, 7), np.float32)
    grid[4, 2] = np.nan
    save_lidar(grid, tmp_path / "l.tif")
    with pytest.raises(DataError, match=r"row=4, col=2"):
        read_lidar(tmp_path / "l.tif", "x")
    filled = read_lidar(tmp_path / "l.tif", "x", fill=-1.0)
    assert filled[4, 2] == -1.0


def test_tile_invariants():
    rgb = np.zeros((4, 4, 3), np.uint8)
    with pytest.raises(DataError):
        Tile("x", rgb, mask=np.full((4, 4), 2))
    with pytest.raises(DataError):
        Tile("x", rgb, lidar=np.full((4, 4), np.inf))
    with pytest.raises(DataError):
        Tile("x", rgb.astype(np.float32))
    t = Tile("x", rgb)
    with pytest.raises(ValueError):
        t.rgb[0, 0, 0] = 1


def test_tile_grid_counts_and_identity():
    rng = np.random.default_rng(0)
    scene = random_tile(rng, 100, 100, "s")
    assert len(tile_grid(scene, 10)) == 100
    one = tile_grid(scene, 100)
    assert len(one) == 1 and np.array_equal(one[0].rgb, scene.rgb)


def test_tile_grid_round_trip_row_major():
    rng = np.random.default_rng(1)
    scene = random_tile(rng, 1000, 1500, "s")
    tiles = tile_grid(scene, 500)
    assert [t.id for t in tiles] == [f"s_{i}_{j}" for i in range(2) for j in range(3)]
    # direct pixel-copy oracle for one tile
    assert np.array_equal(tiles[4].rgb, scene.rgb[500:1000, 500:1000])
    back = mosaic(tiles, 2, 3)
    for name in ("rgb", "lidar", "mask"):
        assert np.array_equal(getattr(back, name), getattr(scene, name))


def test_tile_grid_rejects_non_divisible():
    rng = np.random.default_rng(0)
    with pytest.raises(DimensionMismatch):
        tile_grid(random_tile(rng, 30, 40), 25)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 9))
def test_grid_mosaic_identity(nr, nc, size):
    rng = np.random.default_rng(nr * 100 + nc * 10 + size)
    scene = random_tile(rng, nr * size, nc * size)
    back = mosaic(tile_grid(scene, size), nr, nc)
    assert np.array_equal(back.rgb, scene.rgb) and np.array_equal(back.mask, scene.mask)


def test_save_mask_round_trips(tmp_path):
    rng = np.random.default_rng(2)
    save_mask(np.zeros((64, 64), np.uint8), tmp_path / "z.png")
    assert not read_mask(tmp_path / "z.png").any()
    for i in range(200):
        m = (rng.random((rng.integers(1, 40), rng.integers(1, 40))) < 0.5).astype(np.uint8)
        path = tmp_path / f"m{i % 2}.{'png' if i % 2 else 'tif'}"
        save_mask(m, path)
        assert np.array_equal(read_mask(path), m)


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 20), st.just(3))))
def test_rgb_round_trip(tmp_path_factory, rgb):
    path = tmp_path_factory.mktemp("rgb") / "x.png"
    save_rgb(rgb, path)
    assert np.array_equal(read_rgb(path), rgb)


def test_lidar_round_trip_exact(tmp_path):
    grid = np.random.default_rng(3).normal(0, 100, (17, 23)).astype(np.float32)
    save_lidar(grid, tmp_path / "l.tif")
    assert np.array_equal(read_lidar(tmp_path / "l.tif"), grid)


def test_save_mask_rejects_non_binary(tmp_path):
    with pytest.raises(DataError):
        save_mask(np.full((3, 3), 2), tmp_path / "x.png")


def test_manifest_round_trip_relative_paths(tmp_path):
    entries = [write_triplet(tmp_path, f"t{i}", 8, 8, seed=i) for i in range(3)]
    m = DatasetManifest(tuple(entries), Task.task2, tmp_path)
    write_manifest(m, tmp_path / "m.json")
    raw = json.loads((tmp_path / "m.json").read_text())
    assert raw["entries"][0]["rgb"] == "t0.png"
    back = read_manifest(tmp_path / "m.json")
    assert back.task is Task.task2 and back.entries == m.entries
    tiles = load_tiles(back)
    assert all(t.lidar is not None for t in tiles)


def test_manifest_list_form_and_errors(tmp_path):
    (tmp_path / "a.json").write_text(json.dumps([{"id": "x", "rgb": "x.png"}]))
    m = read_manifest(tmp_path / "a.json")
    assert m.task is Task.task1 and m.entries[0].lidar is None
    e = ManifestEntry("x", tmp_path / "x.png")
    with pytest.raises(ConfigError):
        DatasetManifest((e, e))
    with pytest.raises(ConfigError):
        DatasetManifest((e,), Task.task2)
    with pytest.raises(ConfigError):
        read_manifest(tmp_path / "missing.json")


def test_manifest_split_by_index():
    entries = tuple(ManifestEntry(f"t{i}", f"{i}.png") for i in range(10))
    train, test = DatasetManifest(entries).split(0.8)
    assert [e.id for e in train.entries] == [f"t{i}" for i in range(8)]
    assert [e.id for e in test.entries] == ["t8", "t9"]


def test_scan_directory(tmp_path):
    for sub in ("images", "lidar", "masks"):
        (tmp_path / sub).mkdir()
    rng = np.random.default_rng(0)
    for name in ("b", "a"):
        save_rgb(rng.integers(0, 256, (4, 4, 3), dtype=np.uint8), tmp_path / "images" / f"{name}.png")
        save_lidar(np.zeros((4, 4), np.float32), tmp_path / "lidar" / f"{name}.tif")
        save_mask(np.zeros((4, 4), np.uint8), tmp_path / "masks" / f"{name}.png")
    m = scan_directory(tmp_path, Task.task2)
    assert [e.id for e in m.entries] == ["a", "b"]
    assert m.entries[0].lidar.name == "a.tif"
