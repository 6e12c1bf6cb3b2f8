import numpy as np
import pytest

from lyodry import ModelParameters, ShelfSchedule, integrate, sample_measurements

HOUR = 3600.0


@pytest.fixture(scope="session")
def defaults():
    return ModelParameters(), ShelfSchedule()


@pytest.fixture(scope="session")
def default_truth(defaults):
    """Noise-free 10 h default run stored on the 10 s sample grid."""
    p, s = defaults
    t = np.arange(0.0, 10 * HOUR + 5.0, 10.0)
    return integrate(p, s, t_span=(0.0, t[-1]), t_eval=t)


@pytest.fixture(scope="session")
def default_meas(default_truth):
    return sample_measurements(default_truth, 10.0)
