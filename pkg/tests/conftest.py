import numpy as np
import pytest

from rodl.grid import scenario_from_dict
from rodl.dynamics import build_coarse_model


def small_scenario(**over):
    d = {"name": "small", "coarse": [4, 4], "refine": 4,
         "kappa_m": {"type": "lognormal", "sigma": 0.3, "smooth": 1.0, "seed": 2},
         "source": {"type": "bump", "center": [0.5, 0.5], "width": 0.15, "amplitude": 1.0}}
    d.update(over)
    return scenario_from_dict(d)


@pytest.fixture(scope="session")
def small_model():
    return build_coarse_model(small_scenario(), dt=0.01, layers=1)


@pytest.fixture(scope="session")
def fractured_model():
    sc = small_scenario(fractures=[{"points": [[0.125, 0.0625], [0.125, 0.4375]], "kappa": 1e3}],
                        kappa_m=1.0)
    return build_coarse_model(sc, dt=0.01, layers=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
