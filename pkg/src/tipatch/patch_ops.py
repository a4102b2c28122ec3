"""Patch placement, rotation, tiling, relighting and grayscale projection.

Coordinates are 0-based: a placement ``(x, y)`` puts the patch's top-left
pixel at column ``x``, row ``y``.  Rotations are counter-clockwise in the
displayed image, i.e. ``np.rot90`` over the (row, column) axes, so a 2x2
block ``[[a, b], [c, d]]`` rotated by 90 becomes ``[[b, d], [a, c]]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imagery import ROTATIONS, Patch, Placement, as_image

LUMA = np.array([0.299, 0.587, 0.114])


def _pixels(p) -> np.ndarray:
    return p.pixels if isinstance(p, Patch) else np.asarray(p, dtype=np.float64)


def _check_rot(rot: int) -> int:
    if rot not in ROTATIONS:
        raise ValueError(f"rotation must be one of {ROTATIONS}, got {rot}")
    return rot // 90


def rotate_array(arr: np.ndarray, rot: int) -> np.ndarray:
    """Rotate a (C, H, W) array counter-clockwise by ``rot`` degrees."""
    return np.rot90(arr, _check_rot(rot), axes=(1, 2))


def unrotate_array(arr: np.ndarray, rot: int) -> np.ndarray:
    """Inverse of :func:`rotate_array`; maps footprint gradients back to patch coordinates."""
    return np.rot90(arr, -_check_rot(rot), axes=(1, 2))


def rotate90(p: Patch, rot: int) -> Patch:
    return p.with_pixels(np.ascontiguousarray(rotate_array(p.pixels, rot)))


def apply_patch(img: np.ndarray, p, pl: Placement) -> np.ndarray:
    """Replace the patch footprint of ``img`` by the rotated patch; returns a new image."""
    px = _pixels(p)
    d = px.shape[1]
    _, h, w = img.shape
    pl.check(h, w, d)
    out = np.array(img, dtype=np.float64)
    out[:, pl.y:pl.y + d, pl.x:pl.x + d] = rotate_array(px, pl.rot)
    return as_image(out, copy=False)


def footprint_mask(shape, d: int, pl: Placement) -> np.ndarray:
    """Binary 3xHxW mask with ones on the DxD footprint of ``pl``."""
    _, h, w = shape
    pl.check(h, w, d)
    m = np.zeros((3, h, w))
    m[:, pl.y:pl.y + d, pl.x:pl.x + d] = 1.0
    return m


def random_placement(rng: np.random.Generator, img_dims, d: int,
                     with_rotation: bool = True) -> Placement:
    """Uniform top-left corner over all valid positions, plus a uniform 90-degree rotation."""
    h, w = img_dims[-2:]
    if d > min(h, w):
        raise ValueError(f"patch of side {d} does not fit a {h}x{w} image")
    x = int(rng.integers(0, w - d + 1))
    y = int(rng.integers(0, h - d + 1))
    rot = int(ROTATIONS[rng.integers(0, 4)]) if with_rotation else 0
    return Placement(x, y, rot)


# -------------------------------------------------------------------- tiling

@dataclass(frozen=True)
class TileSpec:
    """Rectangular region ``(x0, y0, w, h)`` to fill with patch copies.

    ``region=None`` means the whole frame (wallpaper mode).
    """

    region: tuple | None = None
    gap: int = 0
    crop_partial: bool = True

    def resolve(self, height: int, width: int) -> tuple[int, int, int, int]:
        if self.gap < 0:
            raise ValueError(f"tile gap must be >= 0, got {self.gap}")
        if self.region is None:
            return 0, 0, width, height
        x0, y0, w, h = (int(v) for v in self.region)
        if w < 1 or h < 1 or x0 < 0 or y0 < 0 or x0 + w > width or y0 + h > height:
            raise ValueError(f"tile region {self.region} outside a {height}x{width} image")
        return x0, y0, w, h


def tile_boxes(height: int, width: int, d: int, spec: TileSpec):
    """Yield ``(row, col, rows, cols)`` destination boxes of each (possibly cropped) tile."""
    x0, y0, w, h = spec.resolve(height, width)
    step = d + spec.gap
    for ty in range(y0, y0 + h, step):
        for tx in range(x0, x0 + w, step):
            rows = min(d, y0 + h - ty)
            cols = min(d, x0 + w - tx)
            if (rows < d or cols < d) and not spec.crop_partial:
                continue
            yield ty, tx, rows, cols


def tile_patch(img: np.ndarray, p, spec: TileSpec = TileSpec()) -> np.ndarray:
    """Lay patch copies row-major over the region; pixels outside the region are untouched."""
    px = _pixels(p)
    d = px.shape[1]
    _, h, w = img.shape
    out = np.array(img, dtype=np.float64)
    for ty, tx, rows, cols in tile_boxes(h, w, d, spec):
        out[:, ty:ty + rows, tx:tx + cols] = px[:, :rows, :cols]
    return as_image(out, copy=False)


def tile_coverage(shape, d: int, spec: TileSpec = TileSpec()) -> float:
    """Fraction of the frame covered by tiles."""
    _, h, w = shape
    covered = sum(r * c for _, _, r, c in tile_boxes(h, w, d, spec))
    return covered / (h * w)


# ---------------------------------------------------------- photometric ops

def shift_brightness(x: np.ndarray, delta: float) -> np.ndarray:
    return np.clip(np.asarray(x, dtype=np.float64) + delta, 0.0, 1.0)


def draw_delta(rng: np.random.Generator, max_delta: float) -> float:
    if not 0.0 <= max_delta < 1.0:
        raise ValueError(f"max_delta must lie in [0, 1), got {max_delta}")
    if max_delta == 0.0:
        return 0.0
    return float(rng.uniform(-max_delta, max_delta))


def relight(x, rng: np.random.Generator, max_delta: float = 0.2):
    """Add one random global brightness offset in ``[-max_delta, max_delta]`` and clamp."""
    delta = draw_delta(rng, max_delta)
    if isinstance(x, Patch):
        return x.with_pixels(shift_brightness(x.pixels, delta))
    return as_image(shift_brightness(x, delta), copy=False)


def bw_array(arr: np.ndarray) -> np.ndarray:
    y = np.tensordot(LUMA, arr, axes=(0, 0))
    return np.clip(np.broadcast_to(y, arr.shape), 0.0, 1.0).copy()


def bw_project(p: Patch) -> Patch:
    """Set every channel to the Rec.601 luma of the pixel."""
    return p.with_pixels(bw_array(p.pixels))


def bw_threshold(p: Patch, level: float = 0.5) -> Patch:
    """Pure black/white export of a patch (luma thresholded at ``level``)."""
    y = bw_array(p.pixels)
    return p.with_pixels((y >= level).astype(np.float64))
