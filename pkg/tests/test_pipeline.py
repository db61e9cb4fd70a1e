import json

import pytest

from episeg import synth
from episeg.cli import main
from episeg.errors import InputError
from episeg.pipeline import STAGES, Pipeline, PipelineManifest, synthetic_manifest

TINY_TRAIN = {"epochs": 1, "steps_per_epoch": 2, "val_patches": 1, "filters": 2,
              "sampler": {"patch_size_px": 64}}


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg = synth.SynthConfig(width=128, height=128, gland_count=(4, 7), artefact_count=4,
                            deformation=synth.Deformation("gaussian_bumps", max_amp=3.0, sigma=16.0))
    synth.write_cohort(root / "cohort", cfg, 4, 1)
    return root


def manifest(cohort, step1="network", **over):
    d = synthetic_manifest(cohort / "cohort" / "cohort.json", 2, step1=step1,
                           registration={"patch_size_px": 64, "patch_overlap_px": 16, "pyramid_levels": 2,
                                         "max_iterations": 5},
                           train_ihc=TINY_TRAIN, train_he=TINY_TRAIN)
    d.update(over)
    return PipelineManifest.from_dict(d)


def actions(pipe):
    return dict(pipe.plan())


def test_fresh_plan_runs_everything(cohort, tmp_path):
    assert set(actions(Pipeline(manifest(cohort), tmp_path)).values()) == {"run"}
    raw = actions(Pipeline(manifest(cohort, "raw"), tmp_path))
    assert raw["train-ihc"] == raw["infer-ihc"] == "skip (not used)"
    assert list(raw) == list(STAGES)


def test_run_resume_and_variants(cohort, tmp_path):
    out = tmp_path / "out"
    res = Pipeline(manifest(cohort), out).run()
    assert res["step1"] == "network" and 0 <= res["he_f1"] <= 1 and 0 <= res["ihc_f1"] <= 1
    state = json.loads((out / "pipeline_state.json").read_text())["stages"]
    assert "train-he[network]" in state and "register" in state

    again = Pipeline(manifest(cohort), out)
    assert set(actions(again).values()) == {"skip (done)"}
    ckpt = out / "models" / "he_network.ckpt"
    stamp = ckpt.stat().st_mtime_ns
    assert again.run() == res
    assert ckpt.stat().st_mtime_ns == stamp

    # changing only the H&E training config reruns the tail
    changed = manifest(cohort, train_he={**TINY_TRAIN, "epochs": 2})
    acts = actions(Pipeline(changed, out))
    assert [s for s, a in acts.items() if a == "run"] == ["train-he", "evaluate"]

    # the raw baseline reuses deconvolution, masks and registration
    raw = Pipeline(manifest(cohort, "raw"), out)
    acts = actions(raw)
    assert acts["register"] == "skip (done)" and acts["mask"] == "skip (done)"
    assert [s for s, a in acts.items() if a == "run"] == ["transfer", "train-he", "evaluate"]
    rres = raw.run()
    assert rres["step1"] == "raw" and "ihc_f1" not in rres
    assert (out / "evaluation" / "raw" / "summary.json").exists()
    assert (out / "evaluation" / "network" / "summary.json").exists()
    assert set(actions(Pipeline(manifest(cohort), out)).values()) == {"skip (done)"}

    assert set(actions(Pipeline(manifest(cohort), out, force=True)).values()) == {"run"}


def test_interrupted_run_resumes_from_last_stage(cohort, tmp_path):
    pipe = Pipeline(manifest(cohort, "raw"), tmp_path)
    pipe.run(stages=["deconvolve", "mask"])
    acts = actions(Pipeline(manifest(cohort, "raw"), tmp_path))
    assert acts["deconvolve"] == acts["mask"] == "skip (done)"
    assert acts["register"] == "run"


def test_manifest_validation(cohort, tmp_path):
    with pytest.raises(InputError):
        manifest(cohort, step1="other")
    with pytest.raises(InputError):
        PipelineManifest.from_dict({"cohort": "nowhere.json"}, tmp_path)
    with pytest.raises(InputError):
        PipelineManifest.from_dict({"slides": [], "colour": 1})


def test_cli_pipeline_dry_run(cohort, tmp_path, capsys):
    d = synthetic_manifest(str(cohort / "cohort" / "cohort.json"), 2)
    (tmp_path / "manifest.json").write_text(json.dumps(d))
    out = tmp_path / "out"
    assert main(["pipeline", str(tmp_path / "manifest.json"), "--out", str(out), "--dry-run"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines == [f"{s}: run" for s in STAGES]
    assert not (out / "pipeline_state.json").exists()
    assert main(["pipeline", str(tmp_path / "missing.json"), "--out", str(out)]) == 2
