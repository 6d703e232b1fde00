from __future__ import annotations

import math
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from defectlab import radial  # noqa: E402
from defectlab.model import FiniteDisk, ModelParams  # noqa: E402

SUB = ModelParams(1.0, 1.0, 1.0)
CRIT = ModelParams(1.0, math.sqrt(3.0), 1.0)
SUPER = ModelParams(0.1, 2.0, 1.0)


def solved(params: ModelParams, n_elements: int = radial.DEFAULT_ELEMENTS, **kw) -> radial.Profile:
    return radial.solve_profile(params, radial.build_mesh(params, n_elements=n_elements, **kw))


@pytest.fixture(scope="session")
def sub_profile():
    return solved(SUB)


@pytest.fixture(scope="session")
def sub_disk10():
    return solved(SUB.with_(domain=FiniteDisk(10.0)), n_elements=500)


@pytest.fixture(scope="session")
def crit_profile():
    return solved(CRIT.with_(domain=FiniteDisk(20.0)))


@pytest.fixture(scope="session")
def super_profile():
    return solved(SUPER, n_elements=500)


@pytest.fixture(scope="session")
def sub_small():
    """Coarser SubCritical whole-plane profile for the cheaper identity checks."""
    return solved(SUB, n_elements=400)
