import csv
import json

import numpy as np
import pytest

from episeg.cli import main
from episeg.registration import DisplacementField
from episeg.tilestore import TiledImage, build_store, write_mask

SYNTH = {"width": 128, "height": 128, "gland_count": [4, 7], "artefact_count": 4,
         "deformation": {"kind": "gaussian_bumps", "max_amp": 4.0, "sigma": 16.0}}


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def jaccard(a, b):
    return (a & b).sum() / (a | b).sum()


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "synth.json").write_text(json.dumps(SYNTH))
    assert main(["synth", "--config", str(root / "synth.json"), "--out", str(root / "cohort"),
                 "--n-slides", "2", "--n-test", "1", "--seed", "7"]) == 0
    return root


def test_synth_writes_cohort(cohort):
    c = cohort / "cohort"
    assert sorted(p.name for p in c.iterdir() if p.is_dir()) == ["slide000", "slide001"]
    man = json.loads((c / "cohort.json").read_text())
    assert [s["split"] for s in man["slides"]] == ["train", "test"]


def test_synth_refuses_overwrite_and_force_is_deterministic(cohort, capsys):
    args = ["synth", "--config", str(cohort / "synth.json"), "--out", str(cohort / "cohort"),
            "--n-slides", "2", "--n-test", "1", "--seed", "7"]
    before = tree_bytes(cohort / "cohort")
    assert main(args) == 2
    assert "--force" in capsys.readouterr().err
    assert main(args + ["--force"]) == 0
    assert tree_bytes(cohort / "cohort") == before


def test_dry_run_writes_nothing(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "c"), "--n-slides", "1", "--dry-run"]) == 0
    assert not (tmp_path / "c").exists()
    assert "would write" in capsys.readouterr().out


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["nonsense"]) == 2
    assert main(["deconvolve", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text("{")
    assert main(["synth", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "x")]) == 2


def test_singular_stain_matrix_exits_3(cohort, tmp_path):
    cfg = {"columns": [[0.65, 0.70, 0.29], [0.65, 0.70, 0.29]]}
    (tmp_path / "stains.json").write_text(json.dumps(cfg))
    code = main(["deconvolve", str(cohort / "cohort" / "slide000" / "ihc"), "--config",
                 str(tmp_path / "stains.json"), "--out", str(tmp_path / "d")])
    assert code == 3


def test_deconvolve_mask_and_force_reproducible(cohort, tmp_path):
    ihc = cohort / "cohort" / "slide000" / "ihc"
    out = tmp_path / "dec"
    assert main(["deconvolve", str(ihc), "--out", str(out)]) == 0
    mask = TiledImage(out / "mask").read_level(0).astype(bool)
    d = cohort / "cohort" / "slide000"
    truth = TiledImage(d / "truth_epithelium").read_level(0).astype(bool)
    arts = TiledImage(d / "truth_artefacts").read_level(0).astype(bool)
    assert jaccard(mask, truth | arts) >= 0.98
    first = tree_bytes(out / "mask")
    assert main(["deconvolve", str(ihc), "--out", str(out), "--force"]) == 0
    assert tree_bytes(out / "mask") == first


def test_register_skip_patchwise_and_trace(cohort, tmp_path):
    d = cohort / "cohort" / "slide000"
    cfg = tmp_path / "reg.json"
    cfg.write_text(json.dumps({"patch_size_px": 64, "patch_overlap_px": 16}))
    out = tmp_path / "reg"
    assert main(["register", str(d / "he"), str(d / "ihc"), "--config", str(cfg), "--out", str(out),
                 "--skip-patchwise"]) == 0
    rows = list(csv.DictReader(open(out / "diagnostics.csv")))
    assert {r["stage"] for r in rows} <= {"affine", "nonparametric"}
    assert any(r["stage"] == "nonparametric" for r in rows)
    runs, prev = [], None
    for r in rows:
        if r["iteration"] == "0":
            runs.append([])
        runs[-1].append(float(r["objective"]))
    for objs in runs:
        assert all(b <= a + 1e-9 * abs(a) for a, b in zip(objs, objs[1:]))
    field = DisplacementField.load(out / "field")
    truth = DisplacementField.load(d / "truth_field")
    tissue = TiledImage(d / "truth_tissue").read_level(0).astype(bool)
    epe = np.sqrt(((field.u - truth.u) ** 2).sum(axis=0))[tissue].mean()
    assert epe <= 1.0


def test_transfer_zero_and_known_field(cohort, tmp_path):
    d = cohort / "cohort" / "slide000"
    zero = tmp_path / "zero"
    DisplacementField(np.zeros((2, 128, 128))).save(zero)
    assert main(["transfer", str(d / "truth_epithelium"), str(zero), "--out", str(tmp_path / "t0")]) == 0
    src = TiledImage(d / "truth_epithelium").read_level(0)
    warped = TiledImage(tmp_path / "t0" / "mask").read_level(0)
    assert np.array_equal(warped, src)
    assert main(["transfer", str(d / "truth_epithelium"), str(d / "truth_field"), "--out", str(tmp_path / "t1")]) == 0
    moved = TiledImage(tmp_path / "t1" / "mask").read_level(0)
    assert set(np.unique(moved)) <= {0, 1}
    he_truth = TiledImage(d / "truth_epithelium_he").read_level(0).astype(bool)
    assert jaccard(moved.astype(bool), he_truth) >= 0.95
    assert main(["transfer", str(d / "truth_epithelium"), str(tmp_path / "nofield"), "--out", str(tmp_path / "t2")]) == 2


def test_train_smoke_and_seed(cohort, tmp_path):
    d = cohort / "cohort" / "slide000"
    cfg = tmp_path / "train.json"
    cfg.write_text(json.dumps({"epochs": 2, "steps_per_epoch": 3, "filters": 2, "val_patches": 2,
                               "sampler": {"patch_size_px": 64}}))
    args = ["train", "--images", str(d / "ihc"), str(d / "ihc"), "--labels", str(d / "truth_epithelium"),
            str(d / "truth_epithelium"), "--config", str(cfg), "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    log_a = (tmp_path / "a" / "training_log.csv").read_text()
    assert log_a == (tmp_path / "b" / "training_log.csv").read_text()
    assert len(log_a.splitlines()) == 3
    assert main(["train", "--images", str(d / "ihc"), "--labels", "--out", str(tmp_path / "c")]) == 2


def test_evaluate_reports_and_overlays(tmp_path, rng):
    truth = rng.random((64, 64)) < 0.4
    pred = truth.copy()
    pred[:8] = ~pred[:8]
    write_mask(tmp_path / "truth", truth, 64, 0.48)
    write_mask(tmp_path / "pred", pred, 64, 0.48)
    write_mask(tmp_path / "perfect", truth, 64, 0.48)
    regions = [{"id": "top", "slide_id": "s", "x": 0, "y": 0, "width_px": 64, "height_px": 16, "mpp": 0.48,
                "label": "tumor", "grades": [4, 4]},
               {"id": "rest", "slide_id": "s", "x": 0, "y": 16, "width_px": 64, "height_px": 48, "mpp": 0.48,
                "label": "benign"}]
    (tmp_path / "regions.json").write_text(json.dumps(regions))
    out = tmp_path / "ev"
    assert main(["evaluate", str(tmp_path / "pred"), str(tmp_path / "truth"), "--regions",
                 str(tmp_path / "regions.json"), "--out", str(out)]) == 0
    rows = {r["region_id"]: r for r in csv.DictReader(open(out / "report.csv"))}
    t, p = truth[:16], pred[:16]
    assert int(rows["top"]["tp"]) == int((t & p).sum()) and int(rows["top"]["fp"]) == int((~t & p).sum())
    assert float(rows["rest"]["f1"]) == 1.0 and rows["top"]["grade_group"] == "4"
    assert (out / "overlays" / "top.png").exists()

    out2 = tmp_path / "ev2"
    assert main(["evaluate", str(tmp_path / "perfect"), str(tmp_path / "truth"), "--out", str(out2)]) == 0
    summary = list(csv.DictReader(open(out2 / "summary.csv")))
    assert summary[0]["group"] == "All" and float(summary[0]["f1_mean"]) == 1.0
    from PIL import Image
    ov = np.asarray(Image.open(out2 / "overlays" / "slide.png"))
    assert {tuple(c) for c in ov[truth]} == {(0, 255, 0)}

    assert main(["evaluate", str(tmp_path / "pred"), str(tmp_path / "truth"), "--regions",
                 str(tmp_path / "regions.json"), "--region", "nowhere", "--out", str(tmp_path / "ev3")]) == 2
