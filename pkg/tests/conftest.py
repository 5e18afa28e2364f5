import numpy as np
import pytest

from partdisc.feature_store import SynthConfig, generate_synthetic


def small_synth(seed=7, **overrides):
    """A compact 6-class dataset used across tests."""
    kwargs = dict(
        C=6,
        old_class_count=3,
        K_true=3,
        d=8,
        N_p=10,
        foreground_patch_count=6,
        class_separation=1.0,
        part_separation=4.0,
        noise_sigma=0.3,
        samples_per_class=20,
        seed=seed,
    )
    kwargs.update(overrides)
    return generate_synthetic(SynthConfig(**kwargs))


@pytest.fixture
def small_dataset():
    return small_synth()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
