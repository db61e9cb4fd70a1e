"""Optical density, colour deconvolution and stain-based masks.

Concentrations ``c`` relate to optical densities by ``od = M @ c`` where the
columns of ``M`` are unit-norm OD vectors of the stains (plus a residual
column). Pixels are RGB 0..255; ``od = -log10((I + 1) / (I0 + 1))``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple

import numpy as np

from . import morphology
from .errors import InputError, SingularStainMatrix

I0 = 255.0
MAX_CONDITION = 1e8


def complete_matrix(col1, col2) -> np.ndarray:
    """3x3 matrix from two stain vectors, residual = normalised cross product."""
    a = np.asarray(col1, float) / np.linalg.norm(col1)
    b = np.asarray(col2, float) / np.linalg.norm(col2)
    r = np.cross(a, b)
    if np.linalg.norm(r) < 1e-12:
        raise SingularStainMatrix("stain vectors are parallel")
    return np.stack([a, b, r / np.linalg.norm(r)], axis=1)


@dataclass(frozen=True)
class StainModel:
    matrix: np.ndarray
    names: Tuple[str, str, str] = ("stain 1", "stain 2", "residual")
    background_intensity: float = I0

    def __post_init__(self):
        M = np.asarray(self.matrix, dtype=float)
        if M.shape != (3, 3) or not np.all(np.isfinite(M)):
            raise InputError("stain matrix must be a finite 3x3 array")
        norms = np.linalg.norm(M, axis=0)
        if np.any(norms < 1e-12):
            raise SingularStainMatrix("stain matrix has a zero column")
        if np.any(np.abs(norms - 1) > 1e-6):
            M = M / norms
        cond = np.linalg.cond(M)
        if not np.isfinite(cond) or cond > MAX_CONDITION:
            raise SingularStainMatrix(f"stain matrix condition number {cond:.3g} too large")
        M.setflags(write=False)
        object.__setattr__(self, "matrix", M)
        object.__setattr__(self, "names", tuple(self.names))

    @classmethod
    def from_vectors(cls, col1, col2, names=("stain 1", "stain 2")) -> "StainModel":
        return cls(complete_matrix(col1, col2), (names[0], names[1], "residual"))

    @classmethod
    def load(cls, path) -> "StainModel":
        """Read ``{"name": ..., "columns": [[r, g, b], x3]}``."""
        with open(path) as f:
            doc = json.load(f)
        cols = np.asarray(doc["columns"], float)
        if cols.shape != (3, 3):
            raise InputError(f"{path}: 'columns' must hold three RGB vectors")
        names = doc.get("names", ["stain 1", "stain 2", "residual"])
        return cls(cols.T, tuple(names))

    def save(self, path, name: str = "stains") -> None:
        doc = {"name": name, "names": list(self.names),
               "columns": self.matrix.T.tolist()}
        Path(path).write_text(json.dumps(doc, indent=2))


# Chromogen column (DAB and NovaRED treated as one epithelium stain) and the
# hematoxylin counterstain; the residual is their cross product.
IHC_DEFAULT = StainModel.from_vectors((0.268, 0.570, 0.776), (0.644, 0.717, 0.267),
                                      names=("DAB+NovaRED combined", "hematoxylin"))
HE_DEFAULT = StainModel.from_vectors((0.644, 0.717, 0.267), (0.093, 0.954, 0.283),
                                     names=("hematoxylin", "eosin"))


@dataclass(frozen=True)
class StainConfig:
    channel_threshold: float = 0.15
    morph_radius: int = 2
    min_object_px: int = 16
    tissue_od_threshold: float = 0.05
    channel: int = 0  # concentration channel used for positivity

    def __post_init__(self):
        if not self.channel_threshold > 0:
            raise InputError("channel_threshold must be > 0")
        if self.morph_radius < 0 or self.min_object_px < 0:
            raise InputError("morph_radius and min_object_px must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "StainConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


def rgb_to_od(rgb, background_intensity: float = I0) -> np.ndarray:
    I = np.asarray(rgb, dtype=float)
    return -np.log10((I + 1.0) / (background_intensity + 1.0))


def od_to_rgb(od, background_intensity: float = I0) -> np.ndarray:
    """Inverse of :func:`rgb_to_od`, clamped to [0, 255] and rounded."""
    with np.errstate(over="ignore"):
        I = (background_intensity + 1.0) * np.power(10.0, -np.asarray(od, float)) - 1.0
    return np.floor(np.clip(I, 0, 255) + 0.5).astype(np.uint8)


def deconvolve(od, model: StainModel) -> np.ndarray:
    """Solve ``M c = od`` for every pixel; last axis of ``od`` is the colour axis."""
    od = np.asarray(od, float)
    flat = od.reshape(-1, 3).T
    try:
        c = np.linalg.solve(model.matrix, flat)
    except np.linalg.LinAlgError as e:
        raise SingularStainMatrix(str(e)) from None
    return c.T.reshape(od.shape)


def compose(concentrations, model: StainModel) -> np.ndarray:
    c = np.asarray(concentrations, float)
    return c @ model.matrix.T


def he_recompose(concentrations, model: StainModel) -> np.ndarray:
    """RGB image from concentration channels (``... x 3`` array)."""
    return od_to_rgb(compose(concentrations, model), model.background_intensity)


def concentrations(rgb, model: StainModel) -> np.ndarray:
    return deconvolve(rgb_to_od(rgb, model.background_intensity), model)


def positivity_mask(channel, cfg: StainConfig) -> np.ndarray:
    """Threshold a concentration channel, then close, open and drop small objects."""
    m = np.asarray(channel) >= cfg.channel_threshold
    m = morphology.binary_close(m, cfg.morph_radius)
    m = morphology.binary_open(m, cfg.morph_radius)
    return morphology.remove_small_objects(m, cfg.min_object_px)


def tissue_mask(rgb, cfg: StainConfig) -> np.ndarray:
    od = rgb_to_od(rgb)
    m = od.mean(axis=-1) >= cfg.tissue_od_threshold
    m = morphology.binary_close(m, cfg.morph_radius)
    return morphology.binary_open(m, cfg.morph_radius)


def ihc_epithelium_mask(rgb, model: StainModel, cfg: StainConfig) -> np.ndarray:
    """Deconvolve an IHC image and threshold its chromogen channel."""
    c = concentrations(rgb, model)
    return positivity_mask(c[..., cfg.channel], cfg)
