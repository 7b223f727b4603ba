import pytest
import torch

from onestep_vton import synthdata as sd
from onestep_vton.config import load_preset

DESK_SIZE = (64, 48)


@pytest.fixture(scope="session")
def desk_cfg():
    return load_preset("desk-64")


@pytest.fixture(scope="session")
def upper_sample():
    return sd.gen_sample(7, DESK_SIZE, "upper")


@pytest.fixture(scope="session")
def sample_set():
    return [sd.gen_sample(i, DESK_SIZE, "upper") for i in range(4)]


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(1234)
