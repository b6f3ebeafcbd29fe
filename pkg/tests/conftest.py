import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from unlearn_lab.pipeline import desk_problem

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def desk():
    """Class-wise desk problem (3 Gaussian classes, random-ReLU features)."""
    return desk_problem(seed=0)


@pytest.fixture(scope="session")
def small_desk():
    """n=180 desk problem used for the influence oracle."""
    return desk_problem(seed=0, n_per_class=60, with_retrain=False, tol=1e-9)


def random_state(rng, C=3, d=4, scale=1.0):
    from unlearn_lab.model_core import ClassifierState

    return ClassifierState(scale * rng.standard_normal((C, d)), scale * rng.standard_normal(C))


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
