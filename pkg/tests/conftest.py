import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mono4d import synth

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def static_scene():
    return synth.build_scene(synth.make_scene("static", seed=0, n_frames=40))


@pytest.fixture(scope="session")
def dynamic_scene():
    return synth.build_scene(synth.make_scene("default", seed=0, n_frames=40))


@pytest.fixture(scope="session")
def short_scene():
    return synth.build_scene(synth.make_scene("default", seed=0, n_frames=12))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, filled in by tests/test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
