import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from globalsfm.synth import SynthConfig, generate_scene


def random_rotations(n, seed):
    return Rotation.random(n, random_state=seed).as_matrix()


@pytest.fixture(scope="session")
def clean_scene():
    """Small noiseless orbit, stored in float64 so constraints hold exactly."""
    return generate_scene(SynthConfig(n_cameras=12, n_points=600, seed=5, quantize=False))


@pytest.fixture(scope="session")
def clean_scene_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    scene = generate_scene(SynthConfig(n_cameras=10, n_points=500, seed=2), out_dir=root)
    return scene, root


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
