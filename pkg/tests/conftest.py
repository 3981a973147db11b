import numpy as np
import pytest

from app import config
from app.stagewise.mdpd import MixtureModel
from app.synth_bench import SynthSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def make_model():
    """Random MDPD factory: make_model(rng, K, M, R, uninformative=())."""

    def _make(rng, n_components, n_workers, n_categories, uninformative=()):
        weights = rng.dirichlet(np.full(n_components, 2.0))
        mu = rng.dirichlet(np.ones(n_categories), size=(n_components, n_workers))
        for i in uninformative:
            mu[:, i, :] = rng.dirichlet(np.ones(n_categories))
        return MixtureModel(weights, mu)

    return _make


@pytest.fixture
def strong_dataset():
    """Small, clearly clustered crowdsourcing data (8 good workers out of 12)."""
    spec = SynthSpec(
        n_workers=12,
        n_items=400,
        n_classes=3,
        mode="decaying",
        n_informative=8,
        p_start=0.9,
        p_end=0.75,
        seed=3,
    )
    return generate(spec)


@pytest.fixture
def output_dir(tmp_path, monkeypatch):
    monkeypatch.setattr(config, "OUTPUT_DIR", str(tmp_path))
    return tmp_path
