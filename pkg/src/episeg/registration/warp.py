"""Resampling images and masks through affine maps or displacement fields."""

from __future__ import annotations

from typing import Union

import numpy as np

from .sampling import bilinear, nearest
from .transforms import AffineTransform, DisplacementField, pixel_grid

Transform = Union[AffineTransform, DisplacementField, np.ndarray]


def sample_coordinates(transform: Transform, shape):
    """Moving-image coordinates ``x + u(x)`` for every pixel of ``shape``."""
    if isinstance(transform, AffineTransform):
        x, y = pixel_grid(shape)
        return transform.apply(x, y)
    u = transform.dense(shape) if isinstance(transform, DisplacementField) else np.asarray(transform, float)
    x, y = pixel_grid(shape)
    return x + u[0], y + u[1]


def warp_image(moving, transform: Transform, interpolation: str = "bilinear",
               fill=None, output_shape=None) -> np.ndarray:
    """``warped(x) = moving(x + u(x))`` on a grid of ``output_shape``.

    Samples outside ``moving`` take ``fill`` (default 255 for bilinear image
    warps, 0 for nearest-neighbour mask warps).
    """
    moving = np.asarray(moving)
    shape = tuple(output_shape or moving.shape[:2])
    px, py = sample_coordinates(transform, shape)
    if interpolation == "nearest":
        return nearest(moving, px, py, cval=0 if fill is None else fill)
    if interpolation != "bilinear":
        raise ValueError(f"unknown interpolation {interpolation!r}")
    cval = 255.0 if fill is None else float(fill)
    chans = [moving] if moving.ndim == 2 else [moving[..., c] for c in range(moving.shape[2])]
    out = np.stack([bilinear(ch, px, py, mode="constant", cval=cval) for ch in chans], axis=-1)
    if moving.ndim == 2:
        out = out[..., 0]
    if np.issubdtype(moving.dtype, np.integer):
        info = np.iinfo(moving.dtype)
        out = np.clip(np.floor(out + 0.5), info.min, info.max).astype(moving.dtype)
    return out


def warp_mask(mask, transform: Transform, output_shape=None) -> np.ndarray:
    """Nearest-neighbour warp of a label mask; outside samples are background."""
    m = np.asarray(mask)
    return warp_image(m, transform, interpolation="nearest", fill=0, output_shape=output_shape)
