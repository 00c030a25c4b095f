import numpy as np
import pytest

from ulc.config import UlcConfig
from ulc.dataset import make_experiment
from ulc.network import init_model


@pytest.fixture(autouse=True)
def _clean_env(monkeypatch):
    monkeypatch.delenv("ULC_SEED", raising=False)
    monkeypatch.delenv("ULC_DEBUG", raising=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_experiment():
    """4 classes in 2-D, 1:5 imbalance, 40% symmetric noise."""
    return make_experiment(
        classes=4, dim=2, per_class=60, test_per_class=20, imbalance_ratio=5.0, noise="sym", noise_rate=0.4, seed=3
    )


@pytest.fixture
def tiny_config():
    return UlcConfig(
        warmup_epochs=2,
        max_epochs=4,
        batch_size=32,
        mc_passes=3,
        aleatoric_samples=3,
        hidden_width=8,
        lambda_u_rampup=2,
        seed=7,
    )


@pytest.fixture
def toy_model():
    return init_model(input_dim=2, class_count=2, hidden_width=8, dropout_rate=0.0, seed=11)
