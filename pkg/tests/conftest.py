import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mvdepth.scene_io import CameraRig

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=400)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rig():
    return CameraRig(f=500.0, D=40.0, cx=127.5, cy=31.5, width=256, height=64)


@pytest.fixture
def small_rig():
    return CameraRig(f=100.0, D=10.0, cx=15.5, cy=3.5, width=32, height=8)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
