import numpy as np
import pytest

from ddnfl.network import NnController, init_controller
from ddnfl.plant import PlantModel, StateBox


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def scalar_plant():
    return PlantModel([[0.5]], [[1.0]])


@pytest.fixture
def unit_box_1d():
    return StateBox([-1.0], [1.0])


def small_controller(weights):
    return NnController(tuple(np.atleast_2d(np.asarray(w, dtype=float)) for w in weights))


def random_controller(rng, sizes, scale=1.0):
    nn = init_controller(sizes, rng=rng)
    return NnController(tuple(scale * W for W in nn.weights))


# criterion number -> (passed, detail); filled by test_acceptance, printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
