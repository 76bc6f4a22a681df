import numpy as np
import pytest

from pencilmag import fieldmodel as fm
from pencilmag.geometry import ScreenConfig


@pytest.fixture(scope="session")
def screen():
    return ScreenConfig()


@pytest.fixture(scope="session")
def dipoles():
    return fm.DipoleSet()


@pytest.fixture(scope="session")
def exact_map(screen, dipoles):
    origin, dims = fm.pencil_map_extent(screen)
    return fm.tabulate_pencil_map(dipoles, origin, dims)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TRAINING_GLYPHS = "abcdefghkmnopqrsuvwxyz0123456789"


@pytest.fixture(scope="session")
def behavior_model(screen, dipoles):
    """Writing-behaviour model fit on 32 glyphs, each at its own constant attitude."""
    from pencilmag.geometry import AttitudeAngles
    from pencilmag.tracker import fit_behavior_model

    rng = np.random.default_rng(1000)
    training = []
    for g in TRAINING_GLYPHS:
        a0 = AttitudeAngles(rng.uniform(40, 80), rng.uniform(80, 150), rng.uniform(0, 360))
        sc = fm.script_glyph(g, screen, cell=int(rng.integers(1, 4)), attitude=a0)
        training.append(fm.simulate_session(sc, dipoles, screen, fm.AmbientField(), fm.SensorNoise(), rng).pose)
    return fit_behavior_model(training)
