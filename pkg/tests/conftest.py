import json
import math
from pathlib import Path

import numpy as np
import pytest

from fedgp.costs import SystemProfile
from fedgp.dataio import load_reference_config

ORACLES = Path(__file__).parent / "oracles"


@pytest.fixture(scope="session")
def frozen_costs():
    return json.loads((ORACLES / "frozen_costs.json").read_text())


@pytest.fixture(scope="session")
def reference_config():
    return load_reference_config()


@pytest.fixture(scope="session")
def reference_profile(reference_config):
    return reference_config.profile()


def unit_profile(N=1, s=1):
    """Every constant equal to one, one-bit messages."""
    ones = np.ones(N + 1)
    return SystemProfile(F=ones, p=ones, r=ones, s=(s,) * (N + 1), C=ones, alpha=ones, dim=1,
                         q_table={s: 0.0} if not math.isinf(s) else {}, M_table={s: 1.0})
