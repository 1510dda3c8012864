import numpy as np
import pytest

from regimix import regime, synth


@pytest.fixture(scope="session")
def small_scene():
    """16x16 half-split bilinear scene, 20 bands."""
    return synth.generate_scene(synth.SynthSpec(rows=16, cols=16, bands=20, M=3, seed=3))


@pytest.fixture(scope="session")
def small_state(small_scene):
    return regime.prepare_scene(small_scene.cube, small_scene.endmembers, regime.TrainConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
