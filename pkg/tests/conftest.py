import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from anytime4d.model import ModelConfig
from anytime4d.scenegen import generate, random_spec

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def bundle():
    return generate(random_spec(11, num_frames=5, resolution=(32, 32)))


@pytest.fixture(scope="session")
def bundles_small():
    return [generate(random_spec(s, num_frames=4, resolution=(32, 32))) for s in range(3)]


@pytest.fixture
def tiny_cfg():
    return ModelConfig(patch_size=8, embed_dim=16, encoder_layers=2, heads=2, motion_layers=2,
                       mlp_ratio=2.0, head_hidden=16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = next((m for n, m in sys.modules.items() if n.endswith("test_acceptance")), None)
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
