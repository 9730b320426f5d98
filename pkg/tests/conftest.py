import numpy as np
import pytest
import torch
from hypothesis import settings

settings.register_profile("socs", deadline=None, max_examples=100, derandomize=True)
settings.load_profile("socs")
torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
