import numpy as np
import pytest

from episeg import synth


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_pair():
    """One 128x128 synthetic H&E/IHC pair with its ground truth."""
    cfg = synth.SynthConfig(width=128, height=128, rng_seed=5)
    return synth.generate_pair(cfg)
