from __future__ import annotations

import pytest

from socketstore.fixtures import default_library, evaluation_topology
from socketstore.netsim import Simulator

# default baseline route through the evaluation topology
DEFAULT_PATH = ["A-R1", "R1-R3", "R3-R4", "R4-B"]
SECOND_PATH = ["A-R2", "R2-R3", "R3-R5", "R5-B"]


@pytest.fixture
def sim() -> Simulator:
    return Simulator(evaluation_topology())


@pytest.fixture
def library():
    return default_library()
