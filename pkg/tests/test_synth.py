import json

import numpy as np
import pytest
from scipy import ndimage

from episeg import stain, synth
from episeg.errors import ConfigInvalid
from episeg.registration import RegistrationConfig, register, to_grayscale
from episeg.tilestore import TiledImage


def jaccard(a, b):
    return (a & b).sum() / (a | b).sum()


def test_same_seed_bit_identical():
    cfg = synth.SynthConfig(width=128, height=128, gland_count=(4, 7), rng_seed=3, artefact_count=5,
                            deformation=synth.Deformation("gaussian_bumps"))
    a, b = synth.generate_pair(cfg), synth.generate_pair(cfg)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert np.array_equal(a[2].field, b[2].field)
    c = synth.generate_pair(cfg.with_seed(4))
    assert not np.array_equal(a[1], c[1])


def test_no_deformation_shares_layout():
    he, ihc, t = synth.generate_pair(synth.SynthConfig(width=128, height=128, gland_count=(4, 7), rng_seed=1))
    assert t.field is None
    assert np.array_equal(t.epithelium, t.epithelium_he)
    assert he.shape == ihc.shape == (128, 128, 3)


@pytest.mark.parametrize("seed", range(5))
def test_threshold_recovers_epithelium_and_artefacts(seed):
    cfg = synth.SynthConfig(rng_seed=seed, artefact_count=12)
    _, ihc, t = synth.generate_pair(cfg)
    mask = stain.ihc_epithelium_mask(ihc, cfg.ihc_model, stain.StainConfig())
    assert jaccard(mask, t.epithelium | t.artefacts) >= 0.98


@pytest.mark.parametrize("seed", range(5))
def test_artefacts_inside_lumina_and_not_epithelium(seed):
    _, _, t = synth.generate_pair(synth.SynthConfig(rng_seed=seed, artefact_count=30))
    assert t.artefacts.any()
    assert not (t.artefacts & t.epithelium).any()
    dist = ndimage.distance_transform_edt(t.lumen)
    assert dist[t.artefacts].min() >= 1


def test_epithelium_fraction_within_bounds():
    cfg = synth.SynthConfig(width=128, height=128, gland_count=(4, 8), gland_radius=(8.0, 14.0))
    lo, hi = synth.epithelium_fraction_bounds(cfg)
    for seed in range(100):
        frac = synth.generate_pair(cfg.with_seed(seed))[2].epithelium.mean()
        assert lo <= frac <= hi


def test_zero_field_warp_is_identity(rng):
    img = rng.integers(0, 256, (20, 30, 3), dtype=np.uint8)
    assert np.array_equal(synth.apply_known_warp(img, np.zeros((2, 20, 30))), img)


@pytest.mark.parametrize("seed", range(4))
def test_warped_area_preserved(seed):
    cfg = synth.SynthConfig(rng_seed=seed, deformation=synth.Deformation("gaussian_bumps", max_amp=8.0))
    _, _, t = synth.generate_pair(cfg)
    assert abs(int(t.epithelium_he.sum()) - int(t.epithelium.sum())) <= 0.02 * t.epithelium.sum()


def test_zero_deformation_registers_to_identity():
    # glass carries no gradient signal, so identity is judged over tissue
    he, ihc, t = synth.generate_pair(synth.SynthConfig(width=128, height=128, gland_count=(4, 7), rng_seed=2))
    field = register(to_grayscale(he), to_grayscale(ihc),
                     RegistrationConfig(patch_size_px=64, patch_overlap_px=16))
    assert np.sqrt((field.u ** 2).sum(axis=0))[t.tissue].mean() <= 0.5


def test_config_validation():
    with pytest.raises(ConfigInvalid):
        synth.SynthConfig(width=16)
    with pytest.raises(ConfigInvalid):
        synth.SynthConfig(deformation=synth.Deformation("gaussian_bumps", max_amp=30.0, sigma=24.0))
    with pytest.raises(ConfigInvalid):
        synth.SynthConfig.from_dict({"colour": 1})
    cfg = synth.SynthConfig(artefact_count=4, deformation=synth.Deformation("affine", t=(1.0, 2.0)))
    assert synth.SynthConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_cohort_layout(tmp_path):
    cfg = synth.SynthConfig(width=64, height=64, gland_count=(2, 4), gland_radius=(8.0, 12.0),
                            deformation=synth.Deformation("gaussian_bumps", max_amp=3.0, sigma=12.0))
    manifest = synth.write_cohort(tmp_path, cfg, 3, 1, tile_size=64)
    on_disk = json.loads((tmp_path / "cohort.json").read_text())
    assert on_disk == json.loads(json.dumps(manifest))
    assert [s["split"] for s in manifest["slides"]] == ["train", "train", "test"]
    for s in manifest["slides"]:
        for key in synth.COHORT_SCHEMA["properties"]["slides"]["items"]["required"]:
            assert key in s
        he = TiledImage(tmp_path / s["he"])
        assert he.read_level(0).shape == (64, 64, 3)
        assert (tmp_path / s["truth_field"] / "field.json").exists()
    he, ihc, t = synth.generate_pair(cfg.with_seed(cfg.rng_seed + 1))
    assert np.array_equal(TiledImage(tmp_path / "slide001" / "ihc").read_level(0), ihc)
