import numpy as np
import pytest
from hypothesis import settings

from twoview import metricnet
from twoview.pipeline import compute_views
from twoview.synthbench import SynthSpec, generate

settings.register_profile("repo", max_examples=60, deadline=None, derandomize=True)
settings.load_profile("repo")

TINY = SynthSpec(num_genera=3, species_per_genus=2, samples_per_species=5, test_per_species=2,
                 image_size=96)


@pytest.fixture(scope="session")
def tiny():
    split, tax = generate(TINY)
    return split


@pytest.fixture(scope="session")
def tiny_views(tiny):
    return compute_views(list(tiny.train) + list(tiny.test))


@pytest.fixture(scope="session")
def toy_models():
    a = metricnet.SiameseModel((224, 224, 3), "global", "genus", "toy2", seed=1,
                               channel_mean=(0.5, 0.5, 0.5))
    b = metricnet.SiameseModel((64, 64, 3), "local", "species", "toy2", seed=2,
                               channel_mean=(0.5, 0.5, 0.5))
    return a, b


def rgb(h, w, seed=0):
    return np.random.default_rng(seed).integers(0, 256, size=(h, w, 3), dtype=np.uint8)
