from pathlib import Path

import numpy as np
import pytest
import torch

from unimm.synth import WorldConfig, generate_synthetic_dataset

FIXTURES = Path(__file__).parent / "fixtures"

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def scenes8():
    return generate_synthetic_dataset(WorldConfig(), 8, 3)


@pytest.fixture(scope="session")
def scenes64():
    return generate_synthetic_dataset(WorldConfig(), 64, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
