import numpy as np
import pytest

from blinkwise.network import Architecture, init_params, init_state


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_arch():
    return Architecture(T=6, n_features=4, fc1=5, hidden=4, n_layers=3, head=3, fc2=6, fc3=5, fc4=4)


@pytest.fixture
def tiny_model(tiny_arch):
    params = init_params(tiny_arch, np.random.default_rng(0))
    return tiny_arch, params, init_state(tiny_arch)


def eye_points(ear, width=4.0):
    """Six landmarks with the given EAR and corners at (0, 0) and (width, 0)."""
    half = ear * width / 4.0
    return np.array([
        [0.0, 0.0], [width / 4, half], [3 * width / 4, half],
        [width, 0.0], [3 * width / 4, -half], [width / 4, -half],
    ])
