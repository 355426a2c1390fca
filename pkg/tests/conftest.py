import os

import numpy as np
import pytest

from config import Config
from core.arch import load_spec


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def shipped():
    """Load a shipped spec by stem."""
    def load(name):
        return load_spec(os.path.join(Config.SPECS_DIR, f'{name}.json'))
    return load


def shipped_names():
    return sorted(name[:-len('.json')] for name in os.listdir(Config.SPECS_DIR) if name.endswith('.json'))
