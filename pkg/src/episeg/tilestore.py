"""Pyramidal tiled raster storage.

A store is a directory holding ``index.json`` plus one raw 8-bit file per
tile, ``L{level}_X{tx}_Y{ty}.bin`` (row-major, channels interleaved). Level
``k`` has dimensions ``ceil(W / 2**k) x ceil(H / 2**k)``; levels continue
until both dimensions are one pixel.

Images are downsampled by 2x2 box mean (rounded half up), label masks by
majority vote with ties going to background.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from PIL import Image

from .errors import (BadLabelValue, BadTileSize, EmptyRaster, InputError,
                     NoSuchLevel, OutOfBounds)

INDEX_NAME = "index.json"
SNAP_TOLERANCE = 0.15  # max |log2(requested_mpp / level_mpp)|


@dataclass(frozen=True)
class ImageMeta:
    width_px: int
    height_px: int
    channels: int
    bit_depth: int
    levels: int
    tile_size_px: int
    mpp_level0: float
    kind: str = "image"  # "image" or "mask"; controls the downsampling rule

    def level_shape(self, level: int) -> Tuple[int, int]:
        """(height, width) of a pyramid level."""
        if not 0 <= level < self.levels:
            raise NoSuchLevel(f"level {level} not in [0, {self.levels})")
        f = 2 ** level
        return -(-self.height_px // f), -(-self.width_px // f)

    def level_mpp(self, level: int) -> float:
        return self.mpp_level0 * 2 ** level

    def tile_grid(self, level: int) -> Tuple[int, int]:
        """Number of tiles (nx, ny) at a level."""
        h, w = self.level_shape(level)
        t = self.tile_size_px
        return -(-w // t), -(-h // t)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RegionSpec:
    slide_id: str
    x: int
    y: int
    width_px: int
    height_px: int
    mpp: float
    label: str = "benign"
    grades: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.width_px <= 0 or self.height_px <= 0:
            raise InputError("region width and height must be positive")
        if self.label not in ("benign", "tumor"):
            raise InputError(f"region label must be benign or tumor, got {self.label!r}")


def count_levels(width: int, height: int) -> int:
    return max(width - 1, height - 1, 0).bit_length() + 1


def downsample_mean(level: np.ndarray) -> np.ndarray:
    """2x2 box mean, rounded half up; edge blocks average the pixels they have."""
    a = level.astype(np.float64)
    h, w = a.shape[:2]
    ph, pw = h % 2, w % 2
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (a.ndim - 2)
    s = np.pad(a, pad)
    n = np.pad(np.ones((h, w)), [(0, ph), (0, pw)])
    sums = s[0::2, 0::2] + s[1::2, 0::2] + s[0::2, 1::2] + s[1::2, 1::2]
    cnt = n[0::2, 0::2] + n[1::2, 0::2] + n[0::2, 1::2] + n[1::2, 1::2]
    if a.ndim == 3:
        cnt = cnt[..., None]
    return np.floor(sums / cnt + 0.5).astype(np.uint8)


def downsample_majority(level: np.ndarray) -> np.ndarray:
    """2x2 majority vote of a {0,1} mask; a tie yields 0."""
    h, w = level.shape
    s = np.pad(level.astype(np.int32), [(0, h % 2), (0, w % 2)])
    n = np.pad(np.ones((h, w), np.int32), [(0, h % 2), (0, w % 2)])
    ones = s[0::2, 0::2] + s[1::2, 0::2] + s[0::2, 1::2] + s[1::2, 1::2]
    cnt = n[0::2, 0::2] + n[1::2, 0::2] + n[0::2, 1::2] + n[1::2, 1::2]
    return (2 * ones > cnt).astype(np.uint8)


def snap_level(meta: ImageMeta, mpp: float) -> int:
    """Pyramid level whose resolution is closest (in log2) to ``mpp``."""
    if mpp <= 0:
        raise NoSuchLevel(f"mpp must be positive, got {mpp}")
    errs = [abs(math.log2(mpp / meta.level_mpp(k))) for k in range(meta.levels)]
    k = int(np.argmin(errs))
    if errs[k] > SNAP_TOLERANCE:
        raise NoSuchLevel(f"no level within tolerance of {mpp} um/px "
                          f"(closest level {k} at {meta.level_mpp(k)} um/px)")
    return k


class TiledImage:
    """Lazy reader for a tile store. Safe to share between reader threads."""

    def __init__(self, path):
        self.path = Path(path)
        index = self.path / INDEX_NAME
        if not index.is_file():
            raise InputError(f"not a tile store: {self.path}")
        with open(index) as f:
            self.meta = ImageMeta(**json.load(f))
        self._cache: dict = {}
        self._lock = threading.Lock()
        self.tiles_read = 0

    def __repr__(self):
        m = self.meta
        return f"TiledImage({str(self.path)!r}, {m.width_px}x{m.height_px}x{m.channels}, levels={m.levels})"

    def _tile_shape(self, level, tx, ty):
        h, w = self.meta.level_shape(level)
        t = self.meta.tile_size_px
        th, tw = min(t, h - ty * t), min(t, w - tx * t)
        return (th, tw) if self.meta.channels == 1 else (th, tw, self.meta.channels)

    def read_tile(self, level: int, tx: int, ty: int) -> np.ndarray:
        key = (level, tx, ty)
        with self._lock:
            tile = self._cache.get(key)
        if tile is not None:
            return tile
        nx, ny = self.meta.tile_grid(level)
        if not (0 <= tx < nx and 0 <= ty < ny):
            raise OutOfBounds(f"tile {key} outside grid {nx}x{ny}")
        raw = np.fromfile(self.path / f"L{level}_X{tx}_Y{ty}.bin", dtype=np.uint8)
        tile = raw.reshape(self._tile_shape(level, tx, ty))
        tile.setflags(write=False)
        with self._lock:
            self._cache[key] = tile
            self.tiles_read += 1
        return tile

    def read_level_region(self, level: int, x: int, y: int, w: int, h: int) -> np.ndarray:
        """Rectangle in level-``level`` pixel coordinates."""
        lh, lw = self.meta.level_shape(level)
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > lw or y + h > lh:
            raise OutOfBounds(f"region ({x},{y},{w},{h}) outside level {level} ({lw}x{lh})")
        t = self.meta.tile_size_px
        shape = (h, w) if self.meta.channels == 1 else (h, w, self.meta.channels)
        out = np.empty(shape, np.uint8)
        for ty in range(y // t, (y + h - 1) // t + 1):
            for tx in range(x // t, (x + w - 1) // t + 1):
                tile = self.read_tile(level, tx, ty)
                x0, y0 = max(x, tx * t), max(y, ty * t)
                x1, y1 = min(x + w, tx * t + tile.shape[1]), min(y + h, ty * t + tile.shape[0])
                out[y0 - y:y1 - y, x0 - x:x1 - x] = tile[y0 - ty * t:y1 - ty * t, x0 - tx * t:x1 - tx * t]
        return out

    def read_level(self, level: int = 0) -> np.ndarray:
        h, w = self.meta.level_shape(level)
        return self.read_level_region(level, 0, 0, w, h)

    def read_region(self, spec: RegionSpec) -> np.ndarray:
        """Read ``spec`` at the pyramid level matching ``spec.mpp``.

        ``spec.x``/``spec.y`` are level-0 coordinates; width and height are in
        pixels of the selected level.
        """
        k = snap_level(self.meta, spec.mpp)
        f = 2 ** k
        return self.read_level_region(k, spec.x // f, spec.y // f, spec.width_px, spec.height_px)

    def clear_cache(self):
        with self._lock:
            self._cache.clear()


def _check_raster(raster) -> np.ndarray:
    a = np.asarray(raster)
    if a.size == 0 or a.ndim not in (2, 3) or a.shape[0] == 0 or a.shape[1] == 0:
        raise EmptyRaster("raster is empty")
    if a.ndim == 3 and a.shape[2] not in (1, 3):
        raise InputError(f"expected 1 or 3 channels, got {a.shape[2]}")
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[..., 0]
    if a.dtype != np.uint8:
        if np.any(a < 0) or np.any(a > 255):
            raise InputError("raster values must fit in 8 bits")
        a = a.astype(np.uint8)
    return a


def build_store(raster, path, tile_size: int = 256, mpp_level0: float = 0.24,
                kind: str = "image") -> TiledImage:
    """Write a full pyramid for ``raster`` under directory ``path``."""
    a = _check_raster(raster)
    if tile_size < 64 or tile_size > 4096 or tile_size & (tile_size - 1):
        raise BadTileSize(f"tile size must be a power of two in [64, 4096], got {tile_size}")
    if kind == "mask" and (a.ndim != 2 or np.any(a > 1)):
        raise BadLabelValue("mask values must be 0 or 1")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for old in path.glob("L*_X*_Y*.bin"):
        old.unlink()
    h, w = a.shape[:2]
    meta = ImageMeta(width_px=w, height_px=h, channels=1 if a.ndim == 2 else 3,
                     bit_depth=8, levels=count_levels(w, h), tile_size_px=tile_size,
                     mpp_level0=float(mpp_level0), kind=kind)
    level = a
    for k in range(meta.levels):
        if k:
            level = downsample_majority(level) if kind == "mask" else downsample_mean(level)
        nx, ny = meta.tile_grid(k)
        for ty in range(ny):
            for tx in range(nx):
                tile = level[ty * tile_size:(ty + 1) * tile_size, tx * tile_size:(tx + 1) * tile_size]
                np.ascontiguousarray(tile).tofile(path / f"L{k}_X{tx}_Y{ty}.bin")
    with open(path / INDEX_NAME, "w") as f:
        json.dump(meta.to_json(), f, indent=2)
    return TiledImage(path)


def write_mask(path, mask, tile_size: int = 256, mpp_level0: float = 0.24) -> TiledImage:
    m = np.asarray(mask)
    if m.dtype == bool:
        m = m.astype(np.uint8)
    if m.ndim != 2:
        raise BadLabelValue("mask must be single-channel")
    if m.size and (m.min() < 0 or m.max() > 1):
        raise BadLabelValue("mask values must be 0 (background) or 1 (epithelium)")
    return build_store(m, path, tile_size, mpp_level0, kind="mask")


def read_mask(path, level: int = 0) -> np.ndarray:
    store = TiledImage(path)
    if store.meta.kind != "mask":
        raise InputError(f"{path} is an image store, not a mask store")
    return store.read_level(level)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im).copy()


def write_png(path, raster) -> None:
    a = np.asarray(raster)
    if a.dtype == bool:
        a = a.astype(np.uint8) * 255
    Image.fromarray(a.astype(np.uint8)).save(path)
