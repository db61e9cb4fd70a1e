"""Binary morphology with disk structuring elements.

A mask is the set of its foreground pixels in the unbounded plane; pixels
outside the image are background. Closing therefore dilates on a canvas
padded by the radius before eroding, which keeps it extensive at the image
border. Arrays with a leading batch axis are processed slice by slice.
"""

import numpy as np
from scipy import ndimage


def disk(radius: int) -> np.ndarray:
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= r * r


def _structure(radius, ndim):
    se = disk(radius)
    return se[None] if ndim == 3 else se


def dilate(mask, radius: int) -> np.ndarray:
    m = np.asarray(mask, bool)
    if radius <= 0:
        return m.copy()
    return ndimage.binary_dilation(m, structure=_structure(radius, m.ndim), border_value=0)


def erode(mask, radius: int) -> np.ndarray:
    m = np.asarray(mask, bool)
    if radius <= 0:
        return m.copy()
    return ndimage.binary_erosion(m, structure=_structure(radius, m.ndim), border_value=0)


def binary_close(mask, radius: int) -> np.ndarray:
    m = np.asarray(mask, bool)
    if radius <= 0:
        return m.copy()
    r = int(radius)
    pad = [(0, 0)] * (m.ndim - 2) + [(r, r), (r, r)]
    c = erode(dilate(np.pad(m, pad), r), r)
    return c[..., r:-r, r:-r]


def binary_open(mask, radius: int) -> np.ndarray:
    return dilate(erode(mask, radius), radius)


def remove_small_objects(mask, min_size: int) -> np.ndarray:
    """Drop 8-connected components with fewer than ``min_size`` pixels."""
    m = np.asarray(mask, bool)
    if min_size <= 0 or not m.any():
        return m.copy()
    labels, n = ndimage.label(m, structure=np.ones((3, 3), bool))
    sizes = np.bincount(labels.ravel(), minlength=n + 1)
    keep = sizes >= min_size
    keep[0] = False
    return keep[labels]
