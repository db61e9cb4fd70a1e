"""Two-step training pipeline with resumable stages.

Stages run in a fixed order::

    deconvolve -> mask -> train-ihc -> infer-ihc -> register -> transfer -> train-he -> evaluate

Step 1 turns IHC slides into epithelium masks (thresholded colour
deconvolution, optionally cleaned by a network trained on annotated slides).
Step 2 registers each H&E slide to its IHC restain, carries the masks over
and trains the H&E network. Each completed stage is recorded in
``pipeline_state.json`` together with a hash of its own inputs and of the
stages it reads from; a rerun skips stages whose hash is unchanged.

Stages downstream of step 1 (transfer, train-he, evaluate) are kept per
step-1 variant, so the raw-mask baseline and the network variant can share
one output directory and one registration.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np

from . import evaluation as ev
from . import morphology, stain
from .errors import InputError
from .model import MiniSegmenter, TrainConfig, load_checkpoint, save_checkpoint, train
from .registration import DisplacementField, RegistrationConfig, register, to_grayscale, warp_mask
from .sampler import PatchSampler, SlideSource
from .tilestore import RegionSpec, TiledImage, build_store, write_mask, write_png

log = logging.getLogger(__name__)

STAGES = ("deconvolve", "mask", "train-ihc", "infer-ihc", "register", "transfer", "train-he", "evaluate")
STATE_FILE = "pipeline_state.json"
VARIANT_STAGES = ("transfer", "train-he", "evaluate")
DEPENDS = {
    "deconvolve": (),
    "mask": ("deconvolve",),
    "train-ihc": ("mask",),
    "infer-ihc": ("train-ihc",),
    "register": (),
    "transfer": ("register", "step1"),
    "train-he": ("transfer",),
    "evaluate": ("train-he", "step1"),
}


@dataclass
class SlideEntry:
    id: str
    split: str
    he: Path
    ihc: Path
    truth_epithelium: Optional[Path] = None      # IHC space
    truth_epithelium_he: Optional[Path] = None   # H&E space
    annotations: Optional[Path] = None           # annotated artefact mask (IHC space)


@dataclass
class PipelineManifest:
    slides: List[SlideEntry]
    stain: stain.StainConfig = field(default_factory=stain.StainConfig)
    stain_model: stain.StainModel = field(default_factory=lambda: stain.IHC_DEFAULT)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    train_ihc: TrainConfig = field(default_factory=TrainConfig)
    train_he: TrainConfig = field(default_factory=TrainConfig)
    step1: str = "network"          # "network" or "raw"
    correction_radius: int = 2      # dilation of annotated artefacts removed from raw masks
    validation_fraction: float = 0.2
    skip_patchwise: bool = False
    regions: Optional[Path] = None
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.step1 not in ("network", "raw"):
            raise InputError(f"step1 must be 'network' or 'raw', got {self.step1!r}")
        if not self.slides:
            raise InputError("manifest lists no slides")

    @property
    def train_slides(self) -> List[SlideEntry]:
        return [s for s in self.slides if s.split == "train"]

    @property
    def test_slides(self) -> List[SlideEntry]:
        return [s for s in self.slides if s.split == "test"]

    @property
    def annotated_slides(self) -> List[SlideEntry]:
        return [s for s in self.train_slides if s.annotations is not None]

    @classmethod
    def load(cls, path) -> "PipelineManifest":
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError:
            raise InputError(f"manifest {path} does not exist") from None
        except json.JSONDecodeError as e:
            raise InputError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d, path.parent)

    @classmethod
    def from_dict(cls, d: dict, base: Path = Path(".")) -> "PipelineManifest":
        d = dict(d)
        known = {"cohort", "slides", "stain", "stain_matrix", "registration", "train_ihc", "train_he",
                 "step1", "annotated_slides", "annotation_key", "correction_radius",
                 "validation_fraction", "skip_patchwise", "regions"}
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown manifest keys: {sorted(unknown)}")
        if "cohort" in d:
            cpath = (base / d["cohort"])
            if not cpath.exists():
                raise InputError(f"cohort manifest {cpath} does not exist")
            slides_raw = json.loads(cpath.read_text())["slides"]
            root = cpath.parent
        else:
            slides_raw = d.get("slides", [])
            root = base
        annotated = d.get("annotated_slides", [])
        key = d.get("annotation_key", "annotations")
        if isinstance(annotated, int):
            annotated = [s["id"] for s in slides_raw if s.get("split", "train") == "train"][:annotated]

        def opt(s, k):
            return root / s[k] if s.get(k) else None

        slides = []
        for s in slides_raw:
            ann = opt(s, key) if s["id"] in annotated else None
            slides.append(SlideEntry(s["id"], s.get("split", "train"), root / s["he"], root / s["ihc"],
                                     opt(s, "truth_epithelium"), opt(s, "truth_epithelium_he"), ann))
        kw = dict(slides=slides, source=d)
        if "stain" in d:
            kw["stain"] = stain.StainConfig.from_dict(d["stain"])
        if d.get("stain_matrix"):
            kw["stain_model"] = stain.StainModel.load(base / d["stain_matrix"])
        if "registration" in d:
            kw["registration"] = RegistrationConfig.from_dict(d["registration"])
        for k in ("train_ihc", "train_he"):
            if k in d:
                kw[k] = TrainConfig.from_dict(d[k])
        for k in ("step1", "correction_radius", "validation_fraction", "skip_patchwise"):
            if k in d:
                kw[k] = d[k]
        if d.get("regions"):
            kw["regions"] = base / d["regions"]
        return cls(**kw)

    def with_seed(self, seed: int) -> "PipelineManifest":
        def reseed(t: TrainConfig) -> TrainConfig:
            return replace(t, seed=seed, sampler=replace(t.sampler, rng_seed=seed))
        return replace(self, train_ihc=reseed(self.train_ihc), train_he=reseed(self.train_he))

    def stage_inputs(self, stage: str) -> dict:
        slides = [{**{k: str(v) for k, v in asdict(s).items()},
                   "digests": [_store_digest(p) for p in (s.he, s.ihc, s.annotations)]}
                  for s in self.slides]
        sections = {
            "deconvolve": {"slides": slides, "stain_model": self.stain_model.matrix.tolist()},
            "mask": {"stain": asdict(self.stain), "correction_radius": self.correction_radius},
            "train-ihc": {"train": _jsonable(self.train_ihc.to_dict()), "step1": self.step1,
                          "validation_fraction": self.validation_fraction},
            "infer-ihc": {"step1": self.step1},
            "register": {"slides": slides, "registration": self.registration.to_dict(),
                         "skip_patchwise": self.skip_patchwise},
            "transfer": {},
            "train-he": {"train": _jsonable(self.train_he.to_dict()),
                         "validation_fraction": self.validation_fraction},
            "evaluate": {"regions": str(self.regions)},
        }
        return sections[stage]


def _jsonable(x):
    return json.loads(json.dumps(x, default=lambda o: list(o) if isinstance(o, tuple) else str(o)))


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _store_digest(path: Optional[Path]) -> Optional[str]:
    """Digest of a store's index plus its level-0 tile listing (sizes), cheap for large slides."""
    if path is None:
        return None
    p = Path(path)
    if not (p / "index.json").exists():
        return "missing"
    h = hashlib.sha256((p / "index.json").read_bytes())
    for t in sorted(p.glob("L0_*.bin")):
        h.update(f"{t.name}:{t.stat().st_size}".encode())
    return h.hexdigest()


class Pipeline:
    """Runs the stages of a :class:`PipelineManifest` into ``out``."""

    def __init__(self, manifest: PipelineManifest, out, jobs: int = 1, force: bool = False,
                 progress: Optional[Callable[[str], None]] = None):
        self.m = manifest
        self.out = Path(out)
        self.jobs = max(int(jobs), 1)
        self.force = force
        self.progress = progress or (lambda msg: log.info(msg))
        self.results: dict = {}

    # state -------------------------------------------------------------------

    def _state_path(self) -> Path:
        return self.out / STATE_FILE

    def load_state(self) -> dict:
        p = self._state_path()
        return json.loads(p.read_text()) if p.exists() else {"stages": {}}

    def _save_state(self, state: dict) -> None:
        tmp = self._state_path().with_suffix(".tmp")
        tmp.write_text(json.dumps(state, indent=2))
        tmp.replace(self._state_path())

    @property
    def variant(self) -> str:
        return self.m.step1

    def state_key(self, stage: str) -> str:
        return f"{stage}[{self.variant}]" if stage in VARIANT_STAGES else stage

    def _deps(self, stage: str) -> List[str]:
        step1 = "infer-ihc" if self.variant == "network" else "mask"
        return [step1 if d == "step1" else d for d in DEPENDS[stage]]

    def _used(self, stage: str) -> bool:
        return not (self.variant == "raw" and stage in ("train-ihc", "infer-ihc"))

    def stage_hashes(self) -> Dict[str, str]:
        hashes: Dict[str, str] = {}
        for st in STAGES:
            if not self._used(st):
                continue
            inputs = {"stage": st, "inputs": self.m.stage_inputs(st),
                      "depends": [hashes[d] for d in self._deps(st)]}
            if st in VARIANT_STAGES:
                inputs["variant"] = self.variant
            hashes[st] = _hash(inputs)
        return hashes

    def plan(self) -> List[tuple]:
        """``(stage, action)`` pairs; action is ``run``, ``skip (done)`` or ``skip (not used)``."""
        state = self.load_state()["stages"]
        hashes = self.stage_hashes()
        plan, running = [], set()
        for st in STAGES:
            if not self._used(st):
                plan.append((st, "skip (not used)"))
                continue
            done = state.get(self.state_key(st), {}).get("hash") == hashes[st]
            if self.force or not done or running.intersection(self._deps(st)):
                running.add(st)
                plan.append((st, "run"))
            else:
                plan.append((st, "skip (done)"))
        return plan

    def run(self, stages: Optional[List[str]] = None) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        state = self.load_state()
        hashes = self.stage_hashes()
        for st, action in self.plan():
            if stages is not None and st not in stages:
                continue
            if action != "run":
                self.progress(f"{st}: {action}")
                continue
            self.progress(f"{st}: running")
            getattr(self, "stage_" + st.replace("-", "_"))()
            state["stages"][self.state_key(st)] = {"hash": hashes[st], "completed": True}
            self._save_state(state)
        summary = self.out / "evaluation" / self.variant / "summary.json"
        if not self.results and summary.exists():
            self.results.update(json.loads(summary.read_text()))
        return self.results

    # paths -------------------------------------------------------------------

    def _slide_dir(self, s: SlideEntry) -> Path:
        return self.out / "slides" / s.id

    def step1_mask_path(self, s: SlideEntry) -> Path:
        d = self._slide_dir(s)
        return d / ("ihc_network_mask" if self.variant == "network" else "raw_mask")

    def he_labels_path(self, s: SlideEntry) -> Path:
        return self._slide_dir(s) / f"he_labels_{self.variant}"

    def he_model_name(self) -> str:
        return f"he_{self.variant}"

    def evaluation_dir(self) -> Path:
        return self.out / "evaluation" / self.variant

    # stages ------------------------------------------------------------------

    def stage_deconvolve(self):
        """Concentration stores (channel values x100, uint8) for every IHC slide, tile by tile."""
        for s in self.m.slides:
            ihc = TiledImage(s.ihc)
            rgb = ihc.read_level(0)
            conc = stain.concentrations(rgb, self.m.stain_model)
            q = np.clip(np.floor(conc * 100 + 0.5), 0, 255).astype(np.uint8)
            build_store(q, self._slide_dir(s) / "concentrations", ihc.meta.tile_size_px, ihc.meta.mpp_level0)

    def stage_mask(self):
        """Raw positivity masks within tissue; corrected masks where artefacts are annotated."""
        cfg = self.m.stain
        for s in self.m.slides:
            ihc = TiledImage(s.ihc)
            rgb = ihc.read_level(0)
            conc = stain.concentrations(rgb, self.m.stain_model)
            raw = stain.positivity_mask(conc[..., cfg.channel], cfg) & stain.tissue_mask(rgb, cfg)
            ts, mpp = ihc.meta.tile_size_px, ihc.meta.mpp_level0
            d = self._slide_dir(s)
            write_mask(d / "raw_mask", raw, ts, mpp)
            if s.annotations is not None:
                art = TiledImage(s.annotations).read_level(0).astype(bool)
                write_mask(d / "corrected_mask", raw & ~morphology.dilate(art, self.m.correction_radius), ts, mpp)

    def _split_validation(self, slides: List[SlideEntry]):
        n_val = int(round(len(slides) * self.m.validation_fraction))
        n_val = min(max(n_val, 1 if len(slides) > 1 else 0), len(slides) - 1)
        return slides[:len(slides) - n_val], slides[len(slides) - n_val:]

    def _train(self, tcfg: TrainConfig, fit: List[SlideSource], val: List[SlideSource], name: str):
        sampler = PatchSampler(fit, tcfg.sampler)
        val_batches = []
        if val and tcfg.val_patches:
            vs = PatchSampler(val, replace(tcfg.sampler, policy="class_uniform"))
            val_batches = [vs.sample(10 ** 9 + i) for i in range(tcfg.val_patches)]
        net = MiniSegmenter(tcfg.filters, rng=np.random.default_rng([tcfg.seed, 1]))
        net, tlog = train(net, sampler.stream(), val_batches, tcfg.optimizer, tcfg.epochs,
                          tcfg.steps_per_epoch, tcfg.augmentation, tcfg.seed, tcfg.batch_size)
        d = self.out / "models"
        d.mkdir(parents=True, exist_ok=True)
        save_checkpoint(net, d / f"{name}.ckpt")
        tlog.write_csv(d / f"{name}_log.csv")
        if sampler.warnings:
            (d / f"{name}_sampler_warnings.json").write_text(json.dumps(sampler.warnings, indent=2))
        return net, tlog

    def stage_train_ihc(self):
        slides = self.m.annotated_slides
        if not slides:
            raise InputError("step-1 network training needs at least one annotated training slide")
        fit, val = self._split_validation(slides)

        def src(s):
            d = self._slide_dir(s)
            return SlideSource(s.id, TiledImage(s.ihc), TiledImage(d / "corrected_mask"),
                               None, TiledImage(s.annotations))

        self._train(self.m.train_ihc, [src(s) for s in fit], [src(s) for s in val], "ihc")

    def stage_infer_ihc(self):
        net = load_checkpoint(self.out / "models" / "ihc.ckpt")
        for s in self.m.slides:
            ihc = TiledImage(s.ihc)
            mask = net.predict_mask(ihc.read_level(0))
            write_mask(self._slide_dir(s) / "ihc_network_mask", mask, ihc.meta.tile_size_px, ihc.meta.mpp_level0)

    def stage_register(self):
        rc = self.m.registration

        def one(s: SlideEntry):
            he = TiledImage(s.he).read_level(0)
            ihc = TiledImage(s.ihc).read_level(0)
            trace: List[dict] = []
            diag: dict = {}
            d = self._slide_dir(s)
            d.mkdir(parents=True, exist_ok=True)
            try:
                field = register(to_grayscale(he), to_grayscale(ihc), rc, trace=trace,
                                 skip_patchwise=self.m.skip_patchwise, diagnostics=diag)
            finally:
                write_trace(d / "registration_trace.csv", trace)
            field.save(d / "field")
            (d / "registration.json").write_text(json.dumps(diag, indent=2, default=float))
            return s.id

        slides = self.m.train_slides
        if self.jobs > 1:
            with ThreadPoolExecutor(self.jobs) as ex:
                list(ex.map(one, slides))
        else:
            for s in slides:
                self.progress(f"register: {s.id}")
                one(s)

    def stage_transfer(self):
        for s in self.m.train_slides:
            d = self._slide_dir(s)
            he = TiledImage(s.he)
            mask = TiledImage(self.step1_mask_path(s)).read_level(0)
            field = DisplacementField.load(d / "field")
            warped = warp_mask(mask, field, output_shape=he.meta.level_shape(0))
            ts, mpp = he.meta.tile_size_px, he.meta.mpp_level0
            write_mask(self.he_labels_path(s), warped, ts, mpp)
            write_mask(d / "he_tissue", stain.tissue_mask(he.read_level(0), self.m.stain), ts, mpp)

    def stage_train_he(self):
        fit, val = self._split_validation(self.m.train_slides)

        def src(s):
            d = self._slide_dir(s)
            return SlideSource(s.id, TiledImage(s.he), TiledImage(self.he_labels_path(s)),
                               TiledImage(d / "he_tissue"))

        self._train(self.m.train_he, [src(s) for s in fit], [src(s) for s in val], self.he_model_name())

    def _regions(self, slides: List[SlideEntry], store_attr: str):
        if self.m.regions is not None:
            by_id = {s.id: s for s in slides}
            out = []
            for rid, spec in ev.load_regions(self.m.regions):
                if spec.slide_id not in by_id:
                    raise InputError(f"region {rid} refers to unknown test slide {spec.slide_id!r}")
                out.append((rid, spec, by_id[spec.slide_id]))
            return out
        out = []
        for s in slides:
            meta = TiledImage(getattr(s, store_attr)).meta
            out.append((s.id, RegionSpec(s.id, 0, 0, meta.width_px, meta.height_px, meta.mpp_level0), s))
        return out

    def evaluate_side(self, side: str, net: MiniSegmenter) -> List[ev.RegionReport]:
        image_attr, truth_attr = ("he", "truth_epithelium_he") if side == "he" else ("ihc", "truth_epithelium")
        slides = [s for s in self.m.test_slides if getattr(s, truth_attr) is not None]
        if not slides:
            raise InputError(f"no test slides with {truth_attr} to evaluate")
        odir = self.evaluation_dir()
        (odir / "overlays").mkdir(parents=True, exist_ok=True)
        preds: Dict[str, np.ndarray] = {}
        reports = []
        for rid, spec, s in self._regions(slides, image_attr):
            img_store = TiledImage(getattr(s, image_attr))
            if s.id not in preds:
                preds[s.id] = net.predict_mask(img_store.read_level(0))
                write_mask(odir / f"{s.id}_{side}_pred", preds[s.id], img_store.meta.tile_size_px,
                           img_store.meta.mpp_level0)
            pred_store = TiledImage(odir / f"{s.id}_{side}_pred")
            pred = pred_store.read_region(spec)
            truth = TiledImage(getattr(s, truth_attr)).read_region(spec)
            rep = ev.score_region(rid, pred, truth, None, spec)
            reports.append(rep)
            write_png(odir / "overlays" / f"{rid}_{side}.png", ev.overlay(pred, truth, img_store.read_region(spec)))
        ev.write_report(odir / f"{side}_report.csv", reports)
        ev.write_summary(odir / f"{side}_summary.csv", ev.aggregate(reports))
        return reports

    def stage_evaluate(self):
        summary = {"step1": self.variant}
        he_net = load_checkpoint(self.out / "models" / f"{self.he_model_name()}.ckpt")
        reps = self.evaluate_side("he", he_net)
        summary["he_f1"] = float(np.mean([r.f1 for r in reps]))
        if self.variant == "network":
            reps = self.evaluate_side("ihc", load_checkpoint(self.out / "models" / "ihc.ckpt"))
            summary["ihc_f1"] = float(np.mean([r.f1 for r in reps]))
        raw_scores = []
        for s in self.m.test_slides:
            if s.truth_epithelium is not None and (self._slide_dir(s) / "raw_mask").exists():
                raw = TiledImage(self._slide_dir(s) / "raw_mask").read_level(0)
                truth = TiledImage(s.truth_epithelium).read_level(0)
                raw_scores.append(ev.metrics(ev.confusion(raw, truth)).f1)
        if raw_scores:
            summary["raw_mask_f1"] = float(np.mean(raw_scores))
        (self.evaluation_dir() / "summary.json").write_text(json.dumps(summary, indent=2))
        self.results.update(summary)


def write_trace(path, trace: List[dict]) -> None:
    """Registration diagnostics: one row per solver iteration."""
    cols = ["stage", "level", "iteration", "objective", "step", "grad_norm", "event"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for row in trace:
            w.writerow({c: row.get(c, "") for c in cols})


def synthetic_manifest(cohort_path, annotated: int = 5, **overrides) -> dict:
    """Manifest dict for a cohort written by :func:`episeg.synth.write_cohort`.

    Artefact truth masks of the first ``annotated`` training slides stand in
    for manual annotations.
    """
    d = {"cohort": str(cohort_path), "annotated_slides": annotated, "annotation_key": "truth_artefacts"}
    d.update(overrides)
    return d
