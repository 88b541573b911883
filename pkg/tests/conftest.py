import numpy as np
import pytest

from latentbank import BankSpec, ModelConfig, RotaryOperator, synth_model


@pytest.fixture(scope="session")
def dense_config():
    return ModelConfig(n_layers=3, d_model=32, n_q_heads=4, n_kv_heads=4, head_dim=8)


@pytest.fixture(scope="session")
def gqa_config():
    return ModelConfig(n_layers=4, d_model=64, n_q_heads=8, n_kv_heads=2, head_dim=8)


@pytest.fixture(scope="session")
def dense_model(dense_config):
    return synth_model(dense_config, seed=3)


@pytest.fixture(scope="session")
def gqa_model(gqa_config):
    return synth_model(gqa_config, seed=5)


@pytest.fixture(scope="session")
def qk_model():
    cfg = ModelConfig(n_layers=2, d_model=32, n_q_heads=4, n_kv_heads=2, head_dim=8, qk_norm_enabled=True)
    return synth_model(cfg, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def warm_spec():
    return BankSpec("warm", "target", "Speak warmly and kindly.", ("direct", "internal-principles"))


@pytest.fixture(scope="session")
def cold_spec():
    return BankSpec("cold", "reference", "Be curt and dismissive.", ("direct",))


@pytest.fixture(scope="session")
def rope8():
    return RotaryOperator(8)
