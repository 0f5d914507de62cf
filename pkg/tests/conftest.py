import numpy as np
import pytest

from dcgl.corpus import SynthConfig, gen_synthetic
from dcgl.model import DataBundle


@pytest.fixture(scope="session")
def toy_bundle():
    graph, kg, semantic, split = gen_synthetic(
        SynthConfig(
            num_users=12,
            num_items=15,
            num_entities=22,
            num_relations=3,
            latent_dim=6,
            avg_user_degree=5,
            seed=7,
        )
    )
    return DataBundle(graph=graph, kg=kg, semantic=semantic, split=split)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
