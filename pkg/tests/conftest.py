import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dsgnn import autodiff as ad  # noqa: E402


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.active_tape().clear()
    yield
    ad.active_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
