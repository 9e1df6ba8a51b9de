import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import naive_erode
from mapseg.errors import ConfigError
from mapseg.morphology import StructuringElement, boundary_mask, dilate, erode, inner_band

masks = arrays(np.uint8, st.tuples(st.integers(1, 24), st.integers(1, 24)), elements=st.integers(0, 1))
odd_k = st.sampled_from([1, 3, 5, 7, 9])


def square(n, size=None, offset=0):
    size = size or n + 4
    m = np.zeros((size, size), dtype=np.uint8)
    m[offset:offset + n, offset:offset + n] = 1
    return m


def test_even_or_nonpositive_kernel_rejected():
    for k in (0, 2, 4, -3):
        with pytest.raises(ConfigError):
            StructuringElement(k)
    with pytest.raises(ConfigError):
        erode(np.ones((4, 4)), 6)


def test_ten_square_erodes_to_four_square():
    m = square(10, 20, 5)
    e = erode(m, 7)
    assert e.sum() == 16
    assert e[8:12, 8:12].all()
    assert boundary_mask(m, 7).sum() == 84


def test_k1_is_identity():
    rng = np.random.default_rng(1)
    m = (rng.random((13, 9)) < 0.5).astype(np.uint8)
    assert np.array_equal(erode(m, 1), m)


def test_random_masks_match_window_scan():
    rng = np.random.default_rng(7)
    for _ in range(100):
        m = (rng.random((32, 32)) < 0.7).astype(np.uint8)
        for k in (3, 5, 7):
            ref = naive_erode(m, k)
            assert np.array_equal(erode(m, k), ref)
            assert np.array_equal(boundary_mask(m, k), m & (1 - ref))
            assert np.array_equal(inner_band(m, k // 2).band, m & (1 - ref))


def test_empty_mask_has_empty_boundary():
    assert boundary_mask(np.zeros((9, 9), np.uint8)).sum() == 0


def test_thin_bar_boundary_is_whole_bar():
    m = np.zeros((11, 30), np.uint8)
    m[4:7, 5:25] = 1
    assert np.array_equal(naive_erode(m, 7), np.zeros_like(m))
    assert np.array_equal(boundary_mask(m, 7), m)


def test_five_square_band_d1_is_16_ring():
    m = square(5, 9, 2)
    b = inner_band(m, 1)
    assert b.width == 1
    assert b.band.sum() == 16
    assert b.band[3:6, 3:6].sum() == 0


def test_full_mask_band_is_border_frame():
    m = np.ones((6, 8), np.uint8)
    band = inner_band(m, 1).band
    frame = np.ones_like(m)
    frame[1:-1, 1:-1] = 0
    assert np.array_equal(band, frame)


def test_band_width_rejects_zero():
    with pytest.raises(ConfigError):
        inner_band(np.ones((3, 3)), 0)


def test_dilate_matches_window_any():
    rng = np.random.default_rng(3)
    m = (rng.random((20, 20)) < 0.2).astype(np.uint8)
    d = dilate(m, 3)
    ref = np.zeros_like(m)
    padded = np.pad(m, 1)
    for i in range(20):
        for j in range(20):
            ref[i, j] = padded[i:i + 3, j:j + 3].any()
    assert np.array_equal(d, ref)


@settings(max_examples=60, deadline=None)
@given(masks, odd_k)
def test_erode_anti_extensive(m, k):
    assert not (erode(m, k) & (1 - m)).any()


@settings(max_examples=60, deadline=None)
@given(masks, masks, odd_k)
def test_erode_monotone(a, b, k):
    if a.shape != b.shape:
        return
    small = a & b
    assert not (erode(small, k) & (1 - erode(a, k))).any()


@settings(max_examples=40, deadline=None)
@given(masks, st.integers(1, 4))
def test_erode_decomposes_into_3x3_steps(m, r):
    step = m
    for _ in range(r):
        step = erode(step, 3)
    assert np.array_equal(erode(m, 2 * r + 1), step)


@settings(max_examples=60, deadline=None)
@given(masks, odd_k)
def test_boundary_and_core_partition_mask(m, k):
    core = erode(m, k)
    ring = boundary_mask(m, k)
    assert not (core & ring).any()
    assert np.array_equal(core | ring, m)


@settings(max_examples=60, deadline=None)
@given(masks, st.integers(1, 4))
def test_band_pixels_within_chebyshev_distance(m, d):
    band = inner_band(m, d).band.astype(bool)
    assert not (band & ~m.astype(bool)).any()
    # distance to the nearest outside pixel (image exterior counts as outside)
    padded = np.pad(m, d, constant_values=0).astype(bool)
    for i, j in np.argwhere(m):
        win = padded[i:i + 2 * d + 1, j:j + 2 * d + 1]
        near_outside = not win.all()
        assert band[i, j] == near_outside
