import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ratecascade.denoiser import ModelConfig

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

SMALL = ModelConfig(frame_dim=4, width=16, layers=2, heads=2, cond_dim=8, max_T=128)


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_model():
    """A briefly trained small model; good enough for sampler convergence checks."""
    from ratecascade.formats import make_scenes
    from ratecascade.training import TrainingData, run_stage1, run_stage2, stage1_config, stage2_config

    data = TrainingData(make_scenes(24, 0.0, 3, frame_dim=SMALL.frame_dim))
    s1 = run_stage1(data, stage1_config(steps=150, batch_size=8, warmup_steps=20), SMALL)
    s2 = run_stage2(data, stage2_config(steps=60, batch_size=8, warmup_steps=10,
                                        learning_rate=5e-4), s1)
    return s2


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
