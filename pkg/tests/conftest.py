import numpy as np
import pytest

from fedshade.radionet import NetConfig, build_group_masks, init_params
from fedshade.rng import stream
from fedshade.synthdata import MapSpec, generate_dataset


@pytest.fixture(scope="session")
def masks():
    return build_group_masks(NetConfig())


@pytest.fixture(scope="session")
def small_data():
    return generate_dataset(stream(7, "data"), MapSpec(), n_maps=6, tx_per_map=3)


@pytest.fixture
def params():
    return init_params(stream(11, "init"), NetConfig())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
