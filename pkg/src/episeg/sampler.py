"""Training patch sampling and per-pixel loss weights.

Centre candidates are indexed once per slide on a coarse grid of cells; each
cell stores how many pixels of every class it holds at the sampling level.
A draw picks a cell with probability proportional to its (weighted) count and
then a pixel inside the cell, so draws are exact samples from the per-pixel
distribution without keeping full-resolution coordinate lists.

Every draw uses its own generator seeded by ``(rng_seed, draw_index)``, so
workers sampling disjoint index ranges reproduce the single-threaded stream.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError, NoPositivePixels
from .tilestore import TiledImage, snap_level

INDEX_MPP = 7.68  # target resolution of the centre index


@dataclass(frozen=True)
class SamplerConfig:
    patch_size_px: int = 512
    mpp: float = 0.48
    policy: str = "class_uniform"  # or "artefact_oversample"
    artefact_multiplier: float = 4.0
    rng_seed: int = 0
    class_weighting: bool = True
    index_level: Optional[int] = None  # None -> level closest to INDEX_MPP

    def __post_init__(self):
        if self.policy not in ("class_uniform", "artefact_oversample"):
            raise InputError(f"unknown sampling policy {self.policy!r}")
        if self.artefact_multiplier < 1:
            raise InputError("artefact_multiplier must be >= 1")
        if self.patch_size_px <= 0:
            raise InputError("patch_size_px must be positive")

    def check_divisible(self, unet_levels: int) -> None:
        if self.patch_size_px % 2 ** (unet_levels - 1):
            raise InputError(f"patch size {self.patch_size_px} not divisible by 2^{unet_levels - 1}")

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass
class PatchBatch:
    image: np.ndarray          # (P, P, 3) uint8
    labels: np.ndarray         # (P, P) uint8 in {0, 1}
    loss_weights: np.ndarray   # (P, P) float, mean 1
    source: Tuple[str, int, int, float] = ("", 0, 0, 0.0)  # slide id, level-0 x, y, mpp
    center_label: int = -1

    def __post_init__(self):
        if self.image.shape[:2] != self.labels.shape or self.labels.shape != self.loss_weights.shape:
            raise InputError("image, labels and loss weights must share dimensions")


def loss_weight_map(labels) -> np.ndarray:
    """Inverse class-frequency weights, normalised to mean 1 over the patch.

    A class covering fraction ``f_c`` gets ``1 / (K f_c)`` where ``K`` is the
    number of classes present, so every present class carries the same
    total weight.
    """
    lab = np.asarray(labels)
    if lab.size == 0:
        return np.zeros(lab.shape)
    classes, counts = np.unique(lab, return_counts=True)
    if not set(classes.tolist()) <= {0, 1}:
        raise InputError("labels must be 0 or 1")
    frac = counts / lab.size
    w = np.zeros(lab.shape)
    for c, f in zip(classes, frac):
        w[lab == c] = 1.0 / (len(classes) * f)
    return w / w.mean()


@dataclass
class SlideSource:
    """One slide registered with the sampler: image, labels and optional masks."""

    slide_id: str
    image: TiledImage
    labels: TiledImage
    tissue: Optional[TiledImage] = None
    artefacts: Optional[TiledImage] = None


class _SlideIndex:
    def __init__(self, src: SlideSource, cfg: SamplerConfig):
        self.src = src
        meta = src.image.meta
        self.level = snap_level(meta, cfg.mpp)
        self.mpp = meta.level_mpp(self.level)
        self.shape = meta.level_shape(self.level)
        if src.labels.meta.level_shape(self.level) != self.shape:
            raise InputError(f"{src.slide_id}: label store does not match the image")
        if cfg.index_level is not None:
            ilevel = cfg.index_level
        else:
            ilevel = int(round(math.log2(INDEX_MPP / meta.mpp_level0)))
        self.cell = 2 ** max(ilevel - self.level, 0)
        h, w = self.shape
        self.cells_y, self.cells_x = -(-h // self.cell), -(-w // self.cell)
        labels = self._read(src.labels)
        tissue = self._read(src.tissue) if src.tissue is not None else np.ones_like(labels)
        art = self._read(src.artefacts) if src.artefacts is not None else np.zeros_like(labels)
        tissue = tissue.astype(bool) | labels.astype(bool)
        self.counts = {
            "epithelium": self._block_count(labels.astype(bool)),
            "background": self._block_count(tissue & ~labels.astype(bool)),
            "tissue": self._block_count(tissue),
            "artefact": self._block_count(tissue & art.astype(bool)),
        }

    def _read(self, store: TiledImage) -> np.ndarray:
        # tile-by-tile read of the sampling level; done once per slide
        return store.read_level(self.level)

    def _block_count(self, m: np.ndarray) -> np.ndarray:
        h, w = m.shape
        c = self.cell
        pad = np.zeros((self.cells_y * c, self.cells_x * c), np.int64)
        pad[:h, :w] = m
        return pad.reshape(self.cells_y, c, self.cells_x, c).sum(axis=(1, 3))

    def cell_pixels(self, cy, cx):
        c = self.cell
        h, w = self.shape
        y0, x0 = cy * c, cx * c
        hh, ww = min(c, h - y0), min(c, w - x0)
        lab = self.src.labels.read_level_region(self.level, x0, y0, ww, hh).astype(bool)
        tis = (self.src.tissue.read_level_region(self.level, x0, y0, ww, hh).astype(bool)
               if self.src.tissue is not None else np.ones_like(lab))
        art = (self.src.artefacts.read_level_region(self.level, x0, y0, ww, hh).astype(bool)
               if self.src.artefacts is not None else np.zeros_like(lab))
        return y0, x0, lab, tis | lab, art


class PatchSampler:
    """Draw :class:`PatchBatch` objects from a set of slides."""

    def __init__(self, slides: Sequence[SlideSource], cfg: SamplerConfig):
        if not slides:
            raise InputError("sampler needs at least one slide")
        self.cfg = cfg
        self.slides = [_SlideIndex(s, cfg) for s in slides]
        for s in self.slides:
            h, w = s.shape
            if h < cfg.patch_size_px or w < cfg.patch_size_px:
                raise InputError(f"{s.src.slide_id}: slide {w}x{h} smaller than patch size "
                                 f"{cfg.patch_size_px}")
        self.warnings: List[dict] = []

    def rng_for(self, index: int) -> np.random.Generator:
        return np.random.default_rng([self.cfg.rng_seed, index])

    def _choose_cell(self, rng, weights):
        flat = weights.ravel().astype(float)
        total = flat.sum()
        k = int(np.searchsorted(np.cumsum(flat), rng.random() * total, side="right"))
        return divmod(min(k, flat.size - 1), weights.shape[1])

    def draw_center(self, index: int):
        """Centre of draw ``index`` as (slide index, row, col, drawn class or -1)."""
        rng = self.rng_for(index)
        si = int(rng.integers(len(self.slides)))
        s = self.slides[si]
        cfg = self.cfg
        cls = -1
        if cfg.policy == "class_uniform":
            cls = int(rng.random() < 0.5)
            key = "epithelium" if cls == 1 else "background"
            weights = s.counts[key]
            if weights.sum() == 0:
                if cls == 1:
                    self._warn(s, index, "no epithelium pixels; falling back to uniform tissue sampling")
                    warnings.warn(f"{s.src.slide_id}: no epithelium pixels; sampling tissue uniformly",
                                  RuntimeWarning, stacklevel=2)
                weights = s.counts["tissue"]
                cls = -1
        else:
            m = cfg.artefact_multiplier
            weights = (s.counts["tissue"] - s.counts["artefact"]) + m * s.counts["artefact"]
        if weights.sum() == 0:
            raise NoPositivePixels(f"{s.src.slide_id}: no tissue pixels to sample from")
        cy, cx = self._choose_cell(rng, weights)
        y0, x0, lab, tis, art = s.cell_pixels(cy, cx)
        if cls == 1:
            pw = lab.astype(float)
        elif cls == 0:
            pw = (tis & ~lab).astype(float)
        elif cfg.policy == "artefact_oversample":
            pw = tis * np.where(art, cfg.artefact_multiplier, 1.0)
        else:
            pw = tis.astype(float)
        flat = pw.ravel()
        k = int(np.searchsorted(np.cumsum(flat), rng.random() * flat.sum(), side="right"))
        k = min(k, flat.size - 1)
        ry, rx = divmod(k, pw.shape[1])
        return si, y0 + ry, x0 + rx, cls

    def _warn(self, s, index, msg):
        self.warnings.append({"slide_id": s.src.slide_id, "draw": index, "warning": msg})

    def patch_origin(self, si, cy, cx):
        s = self.slides[si]
        P = self.cfg.patch_size_px
        h, w = s.shape
        y = min(max(cy - P // 2, 0), h - P)
        x = min(max(cx - P // 2, 0), w - P)
        return y, x

    def sample(self, index: int) -> PatchBatch:
        si, cy, cx, cls = self.draw_center(index)
        s = self.slides[si]
        y, x = self.patch_origin(si, cy, cx)
        P = self.cfg.patch_size_px
        img = s.src.image.read_level_region(s.level, x, y, P, P)
        lab = s.src.labels.read_level_region(s.level, x, y, P, P)
        if self.cfg.class_weighting:
            wts = loss_weight_map(lab)
        else:
            wts = np.ones(lab.shape)
        f = 2 ** s.level
        center_label = int(s.src.labels.read_level_region(s.level, cx, cy, 1, 1)[0, 0])
        return PatchBatch(img, lab, wts, (s.src.slide_id, x * f, y * f, s.mpp), center_label)

    def stream(self, start: int = 0):
        i = start
        while True:
            yield self.sample(i)
            i += 1


def sample_patch(image: TiledImage, mask: TiledImage, cfg: SamplerConfig, index: int = 0,
                 tissue: Optional[TiledImage] = None, artefacts: Optional[TiledImage] = None,
                 slide_id: str = "slide") -> PatchBatch:
    """Single draw from one slide (convenience wrapper around :class:`PatchSampler`)."""
    sampler = PatchSampler([SlideSource(slide_id, image, mask, tissue, artefacts)], cfg)
    return sampler.sample(index)
