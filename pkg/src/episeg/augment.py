"""Patch augmentation.

Geometric operations (flips, rotations, scaling) move image, labels and loss
weights together; labels and weights use nearest-neighbour sampling.
Photometric operations touch the image only. Every range is a closed interval
containing the identity value; an operation whose drawn parameter equals the
identity is skipped, so collapsed ranges reproduce the input exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from . import stain
from .errors import InputError
from .sampler import PatchBatch

Range = Tuple[float, float]


@dataclass(frozen=True)
class AugmentationConfig:
    flip: bool = True
    rotate90: bool = True
    rotation_deg: float = 0.0      # free-angle rotation drawn from [-a, a]
    noise_sigma: Range = (0.0, 10.0)
    blur_sigma: Range = (0.0, 2.0)
    saturation: Range = (0.75, 1.25)
    contrast: Range = (0.75, 1.25)
    brightness: Range = (0.75, 1.25)
    scaling: Range = (1.0, 1.0)
    he_delta: float = 0.0
    he_matrix: Optional[Tuple] = None  # columns; None -> default H&E matrix

    def __post_init__(self):
        for name, ident in (("noise_sigma", 0.0), ("blur_sigma", 0.0), ("saturation", 1.0),
                            ("contrast", 1.0), ("brightness", 1.0), ("scaling", 1.0)):
            lo, hi = getattr(self, name)
            if not lo <= ident <= hi:
                raise InputError(f"{name} range {lo, hi} must contain the identity {ident}")
        if self.he_delta < 0 or self.he_delta >= 1 or self.rotation_deg < 0:
            raise InputError("he_delta must be in [0, 1) and rotation_deg >= 0")

    @classmethod
    def ihc(cls) -> "AugmentationConfig":
        return cls()

    @classmethod
    def he(cls) -> "AugmentationConfig":
        return cls(scaling=(0.9, 1.1), he_delta=0.15)

    @classmethod
    def identity(cls) -> "AugmentationConfig":
        return cls(flip=False, rotate90=False, noise_sigma=(0, 0), blur_sigma=(0, 0),
                   saturation=(1, 1), contrast=(1, 1), brightness=(1, 1))

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentationConfig":
        d = {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()
             if k in cls.__dataclass_fields__}
        if d.get("he_matrix") is not None:
            d["he_matrix"] = tuple(map(tuple, d["he_matrix"]))
        return cls(**d)


def _draw(rng, r: Range) -> float:
    lo, hi = r
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def _resample(a, angle_deg, scale, order):
    """Rotate by ``angle_deg`` and zoom by ``scale`` about the centre, reflect padding."""
    h, w = a.shape[:2]
    th = np.deg2rad(angle_deg)
    c, s = np.cos(th), np.sin(th)
    M = np.array([[c, -s], [s, c]]) / scale  # output (row, col) -> input offsets
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    offset = centre - M @ centre
    if a.ndim == 2:
        return ndimage.affine_transform(a, M, offset, order=order, mode="mirror")
    return np.stack([ndimage.affine_transform(a[..., k], M, offset, order=order, mode="mirror")
                     for k in range(a.shape[2])], axis=-1)


def augment(batch: PatchBatch, cfg: AugmentationConfig, rng) -> PatchBatch:
    img = batch.image
    lab = batch.labels
    wts = batch.loss_weights
    # geometric
    if cfg.flip:
        if rng.random() < 0.5:
            img, lab, wts = img[:, ::-1], lab[:, ::-1], wts[:, ::-1]
        if rng.random() < 0.5:
            img, lab, wts = img[::-1], lab[::-1], wts[::-1]
    if cfg.rotate90:
        k = int(rng.integers(4))
        if k:
            img, lab, wts = np.rot90(img, k), np.rot90(lab, k), np.rot90(wts, k)
    angle = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)) if cfg.rotation_deg > 0 else 0.0
    scale = _draw(rng, cfg.scaling)
    if angle != 0.0 or scale != 1.0:
        img = np.clip(np.floor(_resample(img.astype(float), angle, scale, 1) + 0.5), 0, 255).astype(np.uint8)
        lab = _resample(lab, angle, scale, 0)
        wts = _resample(wts, angle, scale, 0)
    img = np.ascontiguousarray(img)
    lab = np.ascontiguousarray(lab)
    wts = np.ascontiguousarray(wts)

    # photometric, image only
    f = None

    def as_float():
        nonlocal f
        if f is None:
            f = img.astype(float)
        return f

    if cfg.he_delta > 0:
        factors = rng.uniform(1 - cfg.he_delta, 1 + cfg.he_delta, size=3)
        factors[2] = 1.0
        model = stain.HE_DEFAULT if cfg.he_matrix is None else stain.StainModel(np.asarray(cfg.he_matrix).T)
        c = stain.concentrations(img, model) * factors
        f = stain.compose(c, model)
        f = (model.background_intensity + 1.0) * np.power(10.0, -f) - 1.0
    sat = _draw(rng, cfg.saturation)
    if sat != 1.0:
        a = as_float()
        gray = a.mean(axis=-1, keepdims=True)
        f = gray + sat * (a - gray)
    con = _draw(rng, cfg.contrast)
    if con != 1.0:
        a = as_float()
        f = a.mean() + con * (a - a.mean())
    bri = _draw(rng, cfg.brightness)
    if bri != 1.0:
        f = as_float() * bri
    blur = _draw(rng, cfg.blur_sigma)
    if blur > 0:
        f = ndimage.gaussian_filter(as_float(), (blur, blur, 0), mode="mirror")
    noise = _draw(rng, cfg.noise_sigma)
    if noise > 0:
        f = as_float() + rng.normal(0, noise, img.shape)
    if f is not None:
        img = np.clip(np.floor(f + 0.5), 0, 255).astype(np.uint8)
    return replace(batch, image=img, labels=lab, loss_weights=wts)
