import numpy as np
import pytest

from fedgcdr.dataset import SynthConfig, synth_generate
from fedgcdr.federation import FederatedData, PipelineConfig


def small_synth(seed=0, n_users=60, n_items=150, density=0.06, **kw):
    cfg = SynthConfig(n_users=n_users, n_items=n_items, density=density, seed=seed, **kw)
    sd = synth_generate(cfg)
    return sd, FederatedData.from_interactions(sd.domains, sd.registry)


@pytest.fixture(scope="session")
def tiny_data():
    """Four 60-user domains (three shared-latent, one noise) with 150 items each."""
    return small_synth()[1]


@pytest.fixture
def quick_cfg():
    return PipelineConfig(rounds=4, finetune_epochs=3, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
