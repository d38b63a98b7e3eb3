import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from focseg.data import SyntheticSceneSpec, generate_dataset  # noqa: E402


@pytest.fixture(scope="session")
def small_dataset():
    """64-px synthetic scenes: 40 patches, 1:2 ratio, 4 val, 4 test."""
    spec = SyntheticSceneSpec(patch_size=64, buildings_per_patch=(1, 4), seed=3)
    return generate_dataset(spec, 40, "1:2", 4, 4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
