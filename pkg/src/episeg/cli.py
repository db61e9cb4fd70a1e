"""Command-line entry point: ``episeg <command> [options]``.

Exit codes: 0 on success, 2 on usage or input errors, 3 on numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import evaluation as ev
from . import stain, synth
from .errors import EpisegError, InputError
from .tilestore import TiledImage, build_store, write_mask, write_png

log = logging.getLogger("episeg")


def _load_json(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise InputError(f"config {p} does not exist")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"{p}: invalid JSON ({e})") from None


def _store(path) -> TiledImage:
    p = Path(path)
    if not (p / "index.json").exists():
        raise InputError(f"{p} is not a tile store (no index.json)")
    return TiledImage(p)


def _prepare_out(args, *names) -> Optional[Path]:
    """Output directory; refuses to overwrite existing outputs without --force."""
    out = Path(args.out)
    existing = [out / n for n in names if (out / n).exists()]
    if existing and not args.force:
        raise InputError(f"{existing[0]} exists; pass --force to overwrite")
    if args.dry_run:
        for n in names:
            print(f"would write {out / n}")
        return None
    out.mkdir(parents=True, exist_ok=True)
    for p in existing:
        shutil.rmtree(p) if p.is_dir() else p.unlink()
    return out


# commands ------------------------------------------------------------------

def cmd_deconvolve(args) -> int:
    cfg_d = _load_json(args.config)
    scfg = stain.StainConfig.from_dict(cfg_d)
    model = stain.IHC_DEFAULT
    if "columns" in cfg_d:
        cols = np.asarray(cfg_d["columns"], float)
        names = tuple(cfg_d.get("names", model.names))
        if cols.shape == (2, 3):
            model = stain.StainModel.from_vectors(cols[0], cols[1], names[:2])
        else:
            model = stain.StainModel(cols.T, names)
    src = _store(args.ihc)
    out = _prepare_out(args, "concentrations", "mask", "tissue")
    if out is None:
        return 0
    rgb = src.read_level(0)
    conc = stain.concentrations(rgb, model)
    ts, mpp = src.meta.tile_size_px, src.meta.mpp_level0
    build_store(np.clip(np.floor(conc * 100 + 0.5), 0, 255).astype(np.uint8), out / "concentrations", ts, mpp)
    tissue = stain.tissue_mask(rgb, scfg)
    mask = stain.positivity_mask(conc[..., scfg.channel], scfg) & tissue
    write_mask(out / "mask", mask, ts, mpp)
    write_mask(out / "tissue", tissue, ts, mpp)
    print(f"positive fraction {mask.mean():.4f}, tissue fraction {tissue.mean():.4f}")
    return 0


def cmd_register(args) -> int:
    from .pipeline import write_trace
    from .registration import RegistrationConfig, register, to_grayscale

    rc = RegistrationConfig.from_dict(_load_json(args.config))
    fixed, moving = _store(args.fixed), _store(args.moving)
    out = _prepare_out(args, "field", "diagnostics.csv", "registration.json")
    if out is None:
        return 0
    trace: List[dict] = []
    diag: dict = {}
    try:
        field = register(to_grayscale(fixed.read_level(0)), to_grayscale(moving.read_level(0)), rc,
                         trace=trace, skip_patchwise=args.skip_patchwise, jobs=args.jobs, diagnostics=diag)
    finally:
        write_trace(out / "diagnostics.csv", trace)
    field.save(out / "field")
    (out / "registration.json").write_text(json.dumps(diag, indent=2, default=float))
    print(f"max displacement {field.max_norm():.3f} px")
    return 0


def cmd_transfer(args) -> int:
    from .registration import DisplacementField, warp_mask

    mask = _store(args.mask)
    if not (Path(args.field) / "field.json").exists():
        raise InputError(f"{args.field} holds no field.json")
    field = DisplacementField.load(args.field)
    shape = (field.grid_h, field.grid_w) if field.spacing == 1 else mask.meta.level_shape(0)
    if args.reference:
        shape = _store(args.reference).meta.level_shape(0)
    out = _prepare_out(args, "mask")
    if out is None:
        return 0
    warped = warp_mask(mask.read_level(0), field, output_shape=shape)
    write_mask(out / "mask", warped, mask.meta.tile_size_px, mask.meta.mpp_level0)
    return 0


def cmd_train(args) -> int:
    from .augment import AugmentationConfig
    from .model import MiniSegmenter, OptimizerConfig, TrainConfig, save_checkpoint, train
    from .sampler import PatchSampler, SlideSource

    d = _load_json(args.config)
    tcfg = TrainConfig.from_dict(d) if d else TrainConfig()
    if not d.get("optimizer"):
        tcfg = replace(tcfg, optimizer=OptimizerConfig.he() if args.profile == "he" else OptimizerConfig.ihc())
    if not d.get("augmentation"):
        tcfg = replace(tcfg, augmentation=AugmentationConfig.he() if args.profile == "he" else AugmentationConfig.ihc())
    if not d.get("sampler"):
        policy = "artefact_oversample" if args.profile == "ihc" and args.artefacts else "class_uniform"
        tcfg = replace(tcfg, sampler=replace(tcfg.sampler, policy=policy))
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed, sampler=replace(tcfg.sampler, rng_seed=args.seed))
    if len(args.images) != len(args.labels):
        raise InputError("--images and --labels need the same number of stores")
    arts = args.artefacts or [None] * len(args.images)
    tissue = args.tissue or [None] * len(args.images)
    if len(arts) != len(args.images) or len(tissue) != len(args.images):
        raise InputError("--artefacts/--tissue must match --images")
    sources = [SlideSource(Path(i).name, _store(i), _store(l), _store(t) if t else None, _store(a) if a else None)
               for i, l, t, a in zip(args.images, args.labels, tissue, arts)]
    out = _prepare_out(args, "model.ckpt", "training_log.csv")
    if out is None:
        return 0
    fit = sources[:-1] if len(sources) > 1 else sources
    val = sources[-1:] if len(sources) > 1 else []
    sampler = PatchSampler(fit, tcfg.sampler)
    val_batches = []
    if val:
        vs = PatchSampler(val, replace(tcfg.sampler, policy="class_uniform"))
        val_batches = [vs.sample(10 ** 9 + i) for i in range(tcfg.val_patches)]
    net = MiniSegmenter(tcfg.filters, rng=np.random.default_rng([tcfg.seed, 1]))
    net, tlog = train(net, sampler.stream(), val_batches, tcfg.optimizer, tcfg.epochs, tcfg.steps_per_epoch,
                      tcfg.augmentation, tcfg.seed, tcfg.batch_size,
                      progress=lambda r: print(f"epoch {r.epoch}: train {r.train_loss:.4f} "
                                               f"val {r.val_loss:.4f} lr {r.lr:.2e}"))
    save_checkpoint(net, out / "model.ckpt")
    tlog.write_csv(out / "training_log.csv")
    return 0


def cmd_evaluate(args) -> int:
    pred, truth = _store(args.pred), _store(args.truth)
    excl = _store(args.exclusion) if args.exclusion else None
    image = _store(args.image) if args.image else None
    if args.regions:
        regions = ev.load_regions(args.regions)
    else:
        m = truth.meta
        regions = [("slide", ev.RegionSpec("slide", 0, 0, m.width_px, m.height_px, m.mpp_level0))]
    if args.region:
        known = {rid for rid, _ in regions}
        missing = [r for r in args.region if r not in known]
        if missing:
            raise InputError(f"unknown region id(s): {', '.join(missing)}")
        regions = [(rid, spec) for rid, spec in regions if rid in args.region]
    out = _prepare_out(args, "report.csv", "summary.csv", "overlays")
    if out is None:
        return 0
    (out / "overlays").mkdir()
    reports = []
    for rid, spec in regions:
        p, t = pred.read_region(spec), truth.read_region(spec)
        e = excl.read_region(spec) if excl is not None else None
        rep = ev.score_region(rid, p, t, e, spec)
        reports.append(rep)
        img = image.read_region(spec) if image is not None else None
        write_png(out / "overlays" / f"{rid}.png", ev.overlay(p, t, img, e))
    ev.write_report(out / "report.csv", reports)
    rows = ev.aggregate(reports)
    ev.write_summary(out / "summary.csv", rows)
    all_row = rows[0]
    print(f"{all_row.n} regions: F1 {all_row.stats['f1'][0]:.4f}, Jaccard {all_row.stats['jaccard'][0]:.4f}")
    return 0


def cmd_synth(args) -> int:
    cfg = synth.SynthConfig.from_dict(_load_json(args.config))
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.n_slides < 1 or not 0 <= args.n_test <= args.n_slides:
        raise InputError("need n_slides >= 1 and 0 <= n_test <= n_slides")
    names = [f"slide{i:03d}" for i in range(args.n_slides)] + ["cohort.json"]
    out = _prepare_out(args, *names)
    if out is None:
        return 0
    synth.write_cohort(out, cfg, args.n_slides, args.n_test, args.tile_size, args.mpp)
    print(f"wrote {args.n_slides} slide pairs to {out}")
    return 0


def cmd_pipeline(args) -> int:
    from .pipeline import Pipeline, PipelineManifest

    manifest = PipelineManifest.load(args.manifest)
    if args.seed is not None:
        manifest = manifest.with_seed(args.seed)
    if args.skip_patchwise:
        manifest = replace(manifest, skip_patchwise=True)
    pipe = Pipeline(manifest, args.out, jobs=args.jobs, force=args.force, progress=print)
    if args.dry_run:
        for stage, action in pipe.plan():
            print(f"{stage}: {action}")
        return 0
    results = pipe.run()
    if results:
        print(json.dumps(results, indent=2))
    return 0


# parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", default=".", help="output directory (default: current directory)")
    common.add_argument("--seed", type=int, default=None, help="fix all randomness")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers inside a stage")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs / rerun all stages")
    common.add_argument("--dry-run", action="store_true", help="print what would be done, write nothing")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="episeg", description="Epithelium segmentation from restained slide pairs.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("deconvolve", parents=[common], help="IHC store -> concentrations + positivity mask")
    s.add_argument("ihc", help="IHC tile store")
    s.set_defaults(func=cmd_deconvolve)

    s = sub.add_parser("register", parents=[common], help="register fixed (H&E) to moving (IHC)")
    s.add_argument("fixed")
    s.add_argument("moving")
    s.add_argument("--skip-patchwise", action="store_true", help="stop after the deformable stage")
    s.set_defaults(func=cmd_register)

    s = sub.add_parser("transfer", parents=[common], help="warp a mask store through a displacement field")
    s.add_argument("mask")
    s.add_argument("field", help="directory holding field.json / field.bin")
    s.add_argument("--reference", help="store whose level-0 size defines the output grid")
    s.set_defaults(func=cmd_transfer)

    s = sub.add_parser("train", parents=[common], help="train the mini segmenter")
    s.add_argument("--profile", choices=("ihc", "he"), default="ihc")
    s.add_argument("--images", nargs="+", required=True)
    s.add_argument("--labels", nargs="+", required=True)
    s.add_argument("--tissue", nargs="+")
    s.add_argument("--artefacts", nargs="+", help="annotated artefact masks (oversampled)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="score a prediction store against truth")
    s.add_argument("pred")
    s.add_argument("truth")
    s.add_argument("--regions", help="regions.json")
    s.add_argument("--region", action="append", help="evaluate only this region id (repeatable)")
    s.add_argument("--exclusion", help="mask store of pixels to skip")
    s.add_argument("--image", help="image store used as overlay background")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic cohort")
    s.add_argument("--n-slides", type=int, default=4)
    s.add_argument("--n-test", type=int, default=0)
    s.add_argument("--tile-size", type=int, default=64)
    s.add_argument("--mpp", type=float, default=0.48)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pipeline", parents=[common], help="run the two-step pipeline from a manifest")
    s.add_argument("manifest")
    s.add_argument("--skip-patchwise", action="store_true")
    s.set_defaults(func=cmd_pipeline)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EpisegError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (FileNotFoundError, NotADirectoryError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
