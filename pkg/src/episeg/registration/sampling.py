"""Interpolation on pixel grids, image pyramids and gray-scale conversion."""

import numpy as np
from scipy import ndimage

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def to_grayscale(rgb) -> np.ndarray:
    """Luma-weighted gray values, kept as floats."""
    a = np.asarray(rgb, dtype=float)
    if a.ndim == 2:
        return a.copy()
    return a[..., 0] * GRAY_WEIGHTS[0] + a[..., 1] * GRAY_WEIGHTS[1] + a[..., 2] * GRAY_WEIGHTS[2]


def bilinear(img, x, y, mode: str = "constant", cval: float = 0.0) -> np.ndarray:
    """Sample a 2-D array at real coordinates ``x`` (column) and ``y`` (row).

    ``mode="clamp"`` extends the border values; ``"constant"`` returns
    ``cval`` for samples outside ``[0, w-1] x [0, h-1]``.
    """
    img = np.asarray(img, float)
    h, w = img.shape
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    inside = None
    if mode == "constant":
        inside = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.clip(x, 0, w - 1)
    yc = np.clip(y, 0, h - 1)
    x0 = np.minimum(np.floor(xc).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(yc).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = xc - x0
    fy = yc - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    if inside is not None:
        out = np.where(inside, out, cval)
    return out


def nearest(img, x, y, cval=0):
    img = np.asarray(img)
    h, w = img.shape[:2]
    xi = np.floor(np.asarray(x, float) + 0.5).astype(np.intp)
    yi = np.floor(np.asarray(y, float) + 0.5).astype(np.intp)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    if img.ndim == 3:
        inside = inside[..., None]
    return np.where(inside, out, cval).astype(img.dtype)


def downsample2(img) -> np.ndarray:
    """2x2 box mean on floats (edge blocks average what they have)."""
    a = np.asarray(img, float)
    h, w = a.shape
    s = np.pad(a, [(0, h % 2), (0, w % 2)])
    n = np.pad(np.ones_like(a), [(0, h % 2), (0, w % 2)])
    sums = s[0::2, 0::2] + s[1::2, 0::2] + s[0::2, 1::2] + s[1::2, 1::2]
    cnt = n[0::2, 0::2] + n[1::2, 0::2] + n[0::2, 1::2] + n[1::2, 1::2]
    return sums / cnt


def pyramid(img, levels: int, min_size: int = 16):
    """Finest-first list of box-mean downsampled images."""
    out = [np.asarray(img, float)]
    while len(out) < levels and min(out[-1].shape) >= 2 * min_size:
        out.append(downsample2(out[-1]))
    return out


def smooth(img, sigma: float) -> np.ndarray:
    if sigma <= 0:
        return np.asarray(img, float)
    return ndimage.gaussian_filter(np.asarray(img, float), sigma, mode="nearest")


def prolong(u: np.ndarray, shape) -> np.ndarray:
    """Bilinear x2 upsampling of a (2, h, w) displacement array, values doubled."""
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(float)
    cx = (x - 0.5) / 2
    cy = (y - 0.5) / 2
    return np.stack([2 * bilinear(u[c], cx, cy, mode="clamp") for c in range(2)])


def restrict(u: np.ndarray, level: int, shape) -> np.ndarray:
    """Sample a full-resolution (2, H, W) displacement at level-``level`` nodes."""
    f = 2 ** level
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(float)
    fx = f * x + (f - 1) / 2
    fy = f * y + (f - 1) / 2
    return np.stack([bilinear(u[c], fx, fy, mode="clamp") / f for c in range(2)])
