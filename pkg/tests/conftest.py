import os
import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(20240531)


@pytest.fixture(scope="session")
def small_victim():
    """A quickly trained linear_reach victim; competence is not enforced."""
    from polsteal.envs import make_env
    from polsteal.nn import TrainConfig
    from polsteal.victim import train_victim

    env = make_env("linear_reach", r_min_episodes=8)
    return train_victim(env, 12, TrainConfig(epochs=10, batch_size=256), seed=0, hidden=(16, 16), competence=0.0)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])
