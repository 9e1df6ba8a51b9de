"""Binary morphology with square all-ones structuring elements.

Pixels outside the image count as background, so shapes touching the border
erode from that side too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mapseg.errors import ConfigError, DataError


@dataclass(frozen=True)
class StructuringElement:
    """A ``size`` x ``size`` square of ones. ``size`` must be odd."""

    size: int = 7

    def __post_init__(self):
        if not isinstance(self.size, (int, np.integer)) or self.size < 1 or self.size % 2 == 0:
            raise ConfigError(f"structuring element size must be an odd positive integer, got {self.size!r}")

    @property
    def radius(self) -> int:
        return (self.size - 1) // 2


@dataclass(frozen=True, eq=False)
class BoundaryBand:
    band: np.ndarray
    width: int


def _as_se(se) -> StructuringElement:
    if isinstance(se, StructuringElement):
        return se
    return StructuringElement(int(se))


def _as_binary(mask) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise DataError(f"mask must be 2-D, got shape {mask.shape}")
    if mask.dtype != bool:
        if not np.isin(mask, (0, 1)).all():
            raise DataError("mask must be binary (0/1)")
        mask = mask.astype(bool)
    return mask


def _window_count(mask: np.ndarray, r: int, axis: int) -> np.ndarray:
    # number of ones in the 2r+1 window centred on each position along `axis`; zero padding
    n = mask.shape[axis]
    pad = [(0, 0), (0, 0)]
    pad[axis] = (r + 1, r)
    csum = np.cumsum(np.pad(mask.astype(np.int32), pad), axis=axis)
    hi = np.take(csum, np.arange(2 * r + 1, n + 2 * r + 1), axis=axis)
    lo = np.take(csum, np.arange(0, n), axis=axis)
    return hi - lo


def _window_all(mask, r, axis):
    return _window_count(mask, r, axis) == 2 * r + 1


def _window_any(mask, r, axis):
    return _window_count(mask, r, axis) > 0


def erode(mask, se=StructuringElement(7)) -> np.ndarray:
    """Binary erosion; returns a ``uint8`` 0/1 array of the input shape."""
    se = _as_se(se)
    m = _as_binary(mask)
    if se.radius == 0:
        return m.astype(np.uint8)
    # a square window is separable into a row pass and a column pass
    out = _window_all(_window_all(m, se.radius, 1), se.radius, 0)
    return out.astype(np.uint8)


def dilate(mask, se=StructuringElement(3)) -> np.ndarray:
    """Binary dilation with the same square element and zero padding."""
    se = _as_se(se)
    m = _as_binary(mask)
    r = se.radius
    if r == 0:
        return m.astype(np.uint8)
    out = _window_any(_window_any(m, r, 1), r, 0)
    return out.astype(np.uint8)


def boundary_mask(mask, se=StructuringElement(7)) -> np.ndarray:
    """Ring of edge pixels: ``mask AND NOT erode(mask, se)``."""
    m = _as_binary(mask)
    return (m & ~erode(m, se).astype(bool)).astype(np.uint8)


def inner_band(mask, d: int) -> BoundaryBand:
    """Band of thickness ``d`` just inside the mask contour.

    Computed as ``mask AND NOT erode(mask, 2d+1)``, i.e. Chebyshev distance.
    """
    if int(d) != d or d < 1:
        raise ConfigError(f"band width must be an integer >= 1, got {d!r}")
    d = int(d)
    return BoundaryBand(boundary_mask(mask, StructuringElement(2 * d + 1)), d)
