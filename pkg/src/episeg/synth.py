"""Deterministic synthetic restained slide pairs.

Glands are elliptical annuli: the ring is epithelium, the inside is lumen
(glass) and the surrounding tissue is stroma with low-frequency texture.
Stained debris ("corpora amylacea") sits inside lumina; it takes up the IHC
chromogen but is not epithelium. The IHC and H&E renderings share the layout
and are composed through known stain matrices; the H&E image can be warped
by a known smooth displacement field.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from . import stain
from .errors import ConfigInvalid
from .registration.transforms import AffineTransform
from .registration.warp import warp_image, warp_mask


@dataclass(frozen=True)
class Deformation:
    kind: str = "none"  # none | affine | gaussian_bumps
    A: Tuple[Tuple[float, float], Tuple[float, float]] = ((1.0, 0.0), (0.0, 1.0))
    t: Tuple[float, float] = (0.0, 0.0)
    count: int = 4
    max_amp: float = 8.0
    sigma: float = 24.0

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "Deformation":
        if not d:
            return cls()
        d = dict(d)
        if "A" in d:
            d["A"] = tuple(tuple(r) for r in d["A"])
        if "t" in d:
            d["t"] = tuple(d["t"])
        return cls(**d)


@dataclass(frozen=True)
class SynthConfig:
    width: int = 256
    height: int = 256
    rng_seed: int = 0
    gland_count: Tuple[int, int] = (10, 16)
    gland_radius: Tuple[float, float] = (11.0, 22.0)
    ring_thickness: Tuple[float, float] = (5.0, 8.0)
    lumen_fraction: float = 0.85  # share of glands that have a lumen
    artefact_count: int = 3
    deformation: Deformation = field(default_factory=Deformation)
    ihc_matrix: Tuple = tuple(map(tuple, stain.IHC_DEFAULT.matrix.T))
    he_matrix: Tuple = tuple(map(tuple, stain.HE_DEFAULT.matrix.T))
    stain_jitter: float = 0.2
    noise_sigma: float = 2.0

    def __post_init__(self):
        if self.width < 32 or self.height < 32:
            raise ConfigInvalid("synthetic slides must be at least 32x32")
        lo, hi = self.gland_count
        if lo < 0 or hi < lo:
            raise ConfigInvalid("gland_count must be an increasing pair of counts")
        r_lo, r_hi = self.gland_radius
        t_lo, t_hi = self.ring_thickness
        if not 0 < r_lo <= r_hi or not 0 < t_lo <= t_hi:
            raise ConfigInvalid("gland radius and ring thickness ranges must be positive")
        if not 0 <= self.lumen_fraction <= 1:
            raise ConfigInvalid("lumen_fraction must be in [0, 1]")
        if not 0 <= self.stain_jitter < 1:
            raise ConfigInvalid("stain_jitter must be in [0, 1)")
        d = self.deformation
        if d.kind not in ("none", "affine", "gaussian_bumps"):
            raise ConfigInvalid(f"unknown deformation kind {d.kind!r}")
        if d.kind == "gaussian_bumps" and not d.max_amp < d.sigma:
            raise ConfigInvalid("gaussian bump amplitude must be smaller than its sigma")
        if d.kind == "affine" and np.linalg.det(np.asarray(d.A)) <= 0:
            raise ConfigInvalid("affine deformation must preserve orientation")

    @property
    def ihc_model(self) -> stain.StainModel:
        return stain.StainModel(np.asarray(self.ihc_matrix).T, stain.IHC_DEFAULT.names)

    @property
    def he_model(self) -> stain.StainModel:
        return stain.StainModel(np.asarray(self.he_matrix).T, stain.HE_DEFAULT.names)

    def with_seed(self, seed: int) -> "SynthConfig":
        return SynthConfig(**{**self.__dict__, "rng_seed": seed})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigInvalid(f"unknown synth options: {sorted(unknown)}")
        d["deformation"] = Deformation.from_dict(d.get("deformation"))
        for key in ("gland_count", "gland_radius", "ring_thickness"):
            if key in d:
                d[key] = tuple(d[key])
        for key in ("ihc_matrix", "he_matrix"):
            if key in d:
                d[key] = tuple(map(tuple, d[key]))
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigInvalid(str(e)) from None


@dataclass
class SynthTruth:
    epithelium: np.ndarray          # IHC space
    tissue: np.ndarray              # stroma + epithelium + debris, lumina excluded
    artefacts: np.ndarray
    lumen: np.ndarray
    field: Optional[np.ndarray]     # (2, h, w): he(x) = layout(x + u(x))
    concentrations_ihc: np.ndarray
    concentrations_he: np.ndarray
    epithelium_he: np.ndarray       # truth carried into H&E space
    tissue_he: np.ndarray
    artefacts_he: np.ndarray


@dataclass
class _Gland:
    cx: float
    cy: float
    radius: float
    ratio: float
    angle: float
    thickness: float
    lumen: bool


def _smooth_noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
    return n / (np.abs(n).max() + 1e-12)


def _footprint(rng, w, h):
    """Smooth blob covering most of the slide."""
    y, x = np.mgrid[0:h, 0:w].astype(float)
    cx, cy = w / 2 + rng.uniform(-0.04, 0.04) * w, h / 2 + rng.uniform(-0.04, 0.04) * h
    ang = np.arctan2(y - cy, x - cx)
    wobble = 1 + 0.05 * np.sin(3 * ang + rng.uniform(0, 2 * np.pi)) + 0.03 * np.cos(5 * ang + rng.uniform(0, 2 * np.pi))
    rho = np.hypot((x - cx) / (0.47 * w), (y - cy) / (0.47 * h))
    return rho <= wobble


def _place_glands(rng, cfg: SynthConfig, foot):
    h, w = foot.shape
    n = int(rng.integers(cfg.gland_count[0], cfg.gland_count[1] + 1))
    glands = []
    dist_in = ndimage.distance_transform_edt(foot)
    attempts = 0
    while len(glands) < n:
        attempts += 1
        if attempts > 20000:
            raise ConfigInvalid(f"could not place {n} glands on a {w}x{h} slide; reduce count or radius")
        r = rng.uniform(*cfg.gland_radius)
        cx, cy = rng.uniform(0, w), rng.uniform(0, h)
        if dist_in[int(cy), int(cx)] < r + 3:
            continue
        if any(np.hypot(cx - g.cx, cy - g.cy) < r + g.radius + 4 for g in glands):
            continue
        t = min(rng.uniform(*cfg.ring_thickness), r)
        glands.append(_Gland(cx, cy, r, rng.uniform(0.75, 1.0), rng.uniform(0, np.pi), t,
                             bool(rng.random() < cfg.lumen_fraction)))
    return glands


def _render_layout(rng, cfg: SynthConfig):
    w, h = cfg.width, cfg.height
    foot = _footprint(rng, w, h)
    glands = _place_glands(rng, cfg, foot)
    y, x = np.mgrid[0:h, 0:w].astype(float)
    epi = np.zeros((h, w), bool)
    lumen = np.zeros((h, w), bool)
    art = np.zeros((h, w), bool)
    lumen_glands = []
    for g in glands:
        c, s = np.cos(g.angle), np.sin(g.angle)
        xr = (x - g.cx) * c + (y - g.cy) * s
        yr = -(x - g.cx) * s + (y - g.cy) * c
        outer = np.hypot(xr / g.radius, yr / (g.ratio * g.radius)) <= 1
        inner_a, inner_b = g.radius - g.thickness, g.ratio * g.radius - g.thickness
        if g.lumen and min(inner_a, inner_b) >= 4:
            inner = np.hypot(xr / inner_a, yr / inner_b) <= 1
            lumen |= inner
            lumen_glands.append((g, inner))
        else:
            inner = np.zeros_like(outer)
        epi |= outer & ~inner
    # debris strictly inside lumina, away from the epithelium
    dist_lumen = ndimage.distance_transform_edt(lumen)
    for _ in range(cfg.artefact_count):
        if not lumen_glands:
            break
        g, inner = lumen_glands[int(rng.integers(len(lumen_glands)))]
        rb = rng.uniform(2.5, 4.0)
        cand = np.argwhere(inner & (dist_lumen >= rb + 4.5))
        if len(cand) == 0:
            continue
        cy, cx = cand[int(rng.integers(len(cand)))]
        art |= np.hypot(x - cx, y - cy) <= rb
    art &= lumen
    stroma = foot & ~epi & ~lumen
    return foot, epi, lumen, art, stroma


def _soft(m, sigma=0.45):
    return ndimage.gaussian_filter(m.astype(float), sigma)


def _render(conc, model, rng, noise_sigma):
    od = stain.compose(conc, model)
    rgb = (model.background_intensity + 1.0) * np.power(10.0, -od) - 1.0
    rgb = rgb + rng.normal(0, noise_sigma, rgb.shape)
    return np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)


def _bump_field(rng, d: Deformation, shape):
    h, w = shape
    y, x = np.mgrid[0:h, 0:w].astype(float)
    u = np.zeros((2, h, w))
    for _ in range(d.count):
        cx, cy = rng.uniform(0.15, 0.85) * w, rng.uniform(0.15, 0.85) * h
        ang = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        g = amp * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * d.sigma ** 2))
        u[0] += np.cos(ang) * g
        u[1] += np.sin(ang) * g
    peak = np.sqrt((u ** 2).sum(axis=0)).max()
    if peak > 0:
        u *= d.max_amp / peak
    return u


def true_field(cfg: SynthConfig, rng) -> Optional[np.ndarray]:
    d = cfg.deformation
    shape = (cfg.height, cfg.width)
    if d.kind == "none":
        return None
    if d.kind == "affine":
        return AffineTransform(np.asarray(d.A), np.asarray(d.t)).displacement(shape)
    return _bump_field(rng, d, shape)


def generate_pair(cfg: SynthConfig):
    """Render ``(he_image, ihc_image, truth)`` for one synthetic slide."""
    rng = np.random.default_rng(cfg.rng_seed)
    foot, epi, lumen, art, stroma = _render_layout(rng, cfg)
    h, w = epi.shape
    tex = _smooth_noise(rng, (h, w), 6.0)
    speck = _smooth_noise(rng, (h, w), 0.8)
    jit = cfg.stain_jitter
    ihc_epi = 0.6 * rng.uniform(1 - jit, 1 + jit)
    ihc_art = 0.55 * rng.uniform(1 - jit, 1 + jit)
    hema_str = 0.22 * rng.uniform(1 - jit, 1 + jit)
    epi_s, art_s, str_s = _soft(epi), _soft(art), _soft(stroma)

    c_ihc = np.zeros((h, w, 3))
    c_ihc[..., 0] = epi_s * ihc_epi * (1 + 0.15 * speck) + art_s * ihc_art
    c_ihc[..., 1] = str_s * hema_str * (1 + 0.35 * tex) + epi_s * 0.25 * (1 + 0.5 * speck)
    c_he = np.zeros((h, w, 3))
    he_h = 0.5 * rng.uniform(1 - jit, 1 + jit)
    he_e = 0.35 * rng.uniform(1 - jit, 1 + jit)
    c_he[..., 0] = epi_s * he_h * (1 + 0.3 * speck) + str_s * 0.08 * (1 + 0.3 * tex) + art_s * 0.05
    c_he[..., 1] = str_s * he_e * (1 + 0.35 * tex) + epi_s * 0.15 + art_s * 0.55
    c_ihc = np.clip(c_ihc, 0, None)
    c_he = np.clip(c_he, 0, None)

    ihc = _render(c_ihc, cfg.ihc_model, rng, cfg.noise_sigma)
    he = _render(c_he, cfg.he_model, rng, cfg.noise_sigma)
    tissue = stroma | epi | art
    u = true_field(cfg, rng)
    if u is None:
        epi_he, tissue_he, art_he = epi.copy(), tissue.copy(), art.copy()
    else:
        he = warp_image(he, u)
        epi_he = warp_mask(epi.astype(np.uint8), u).astype(bool)
        tissue_he = warp_mask(tissue.astype(np.uint8), u).astype(bool)
        art_he = warp_mask(art.astype(np.uint8), u).astype(bool)
    truth = SynthTruth(epithelium=epi, tissue=tissue, artefacts=art, lumen=lumen, field=u,
                       concentrations_ihc=c_ihc, concentrations_he=c_he,
                       epithelium_he=epi_he, tissue_he=tissue_he, artefacts_he=art_he)
    return he, ihc, truth


def apply_known_warp(image, field: np.ndarray, interpolation: str = "bilinear"):
    """Warp with a dense truth field (same convention as registration.warp_image)."""
    if interpolation == "nearest":
        return warp_mask(image, field)
    return warp_image(image, field)


def epithelium_fraction_bounds(cfg: SynthConfig) -> Tuple[float, float]:
    """Loose bounds on the epithelium pixel fraction implied by the gland geometry."""
    area = cfg.width * cfg.height
    r_lo, r_hi = cfg.gland_radius
    t_lo, t_hi = cfg.ring_thickness
    n_lo, n_hi = cfg.gland_count
    ratio_lo = 0.75
    # thinnest ring of the smallest, most eccentric gland, minus a pixel of discretisation
    ring_lo = np.pi * ratio_lo * (r_lo ** 2 - max(r_lo - t_lo, 0) ** 2) - 2 * np.pi * r_lo
    if cfg.lumen_fraction < 1:
        solid_hi = np.pi * r_hi ** 2
    else:
        solid_hi = np.pi * (r_hi ** 2 - max(r_hi - t_hi, 0) ** 2)
    hi = n_hi * (solid_hi + 2 * np.pi * r_hi)
    return max(n_lo * ring_lo, 0) / area, min(hi / area, 1.0)


def write_cohort(out_dir, cfg: SynthConfig, n_slides: int, n_test: int = 0, tile_size: int = 64,
                 mpp: float = 0.48) -> dict:
    """Write ``n_slides`` pairs as tile stores plus truth masks and a manifest."""
    from .tilestore import build_store, write_mask

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    slides = []
    for i in range(n_slides):
        sid = f"slide{i:03d}"
        he, ihc, truth = generate_pair(cfg.with_seed(cfg.rng_seed + i))
        d = out / sid
        build_store(he, d / "he", tile_size, mpp)
        build_store(ihc, d / "ihc", tile_size, mpp)
        write_mask(d / "truth_epithelium", truth.epithelium, tile_size, mpp)
        write_mask(d / "truth_epithelium_he", truth.epithelium_he, tile_size, mpp)
        write_mask(d / "truth_artefacts", truth.artefacts, tile_size, mpp)
        write_mask(d / "truth_tissue", truth.tissue, tile_size, mpp)
        if truth.field is not None:
            from .registration.transforms import DisplacementField
            DisplacementField(truth.field).save(d / "truth_field")
        slides.append({
            "id": sid,
            "split": "test" if i >= n_slides - n_test else "train",
            "he": f"{sid}/he", "ihc": f"{sid}/ihc",
            "truth_epithelium": f"{sid}/truth_epithelium",
            "truth_epithelium_he": f"{sid}/truth_epithelium_he",
            "truth_artefacts": f"{sid}/truth_artefacts",
            "truth_tissue": f"{sid}/truth_tissue",
            "truth_field": f"{sid}/truth_field" if truth.field is not None else None,
        })
    manifest = {"synth": cfg.to_dict(), "slides": slides}
    (out / "cohort.json").write_text(json.dumps(manifest, indent=2))
    return manifest


COHORT_SCHEMA = {
    "type": "object",
    "required": ["synth", "slides"],
    "properties": {
        "synth": {"type": "object"},
        "slides": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "split", "he", "ihc", "truth_epithelium"],
                "properties": {
                    "id": {"type": "string"},
                    "split": {"enum": ["train", "test"]},
                    "he": {"type": "string"},
                    "ihc": {"type": "string"},
                    "truth_epithelium": {"type": "string"},
                    "truth_field": {"type": ["string", "null"]},
                },
            },
        },
    },
}
