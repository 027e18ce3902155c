import numpy as np
import pytest

from loss_convexification.tasks import RegistrationTask, analytic_oracles


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: paired training runs, deselect with -m 'not slow'")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def oracles():
    return analytic_oracles()


@pytest.fixture
def small_registration():
    """Tiny 2-D task with a seed-0 network and a handful of pairs."""
    task = RegistrationTask(dim=2, width=4, feature_dim=3)
    params = task.init_params(np.random.default_rng(0))
    samples = task.generate_dataset({"n_pairs": 4, "n_points": 8, "seed": 0})
    return task, params, samples
