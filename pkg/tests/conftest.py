import numpy as np
import pytest
import torch

from vvmic.model import VVAE
from vvmic.transforms import ModelConfig
from vvmic.volume_io import Volume


@pytest.fixture
def debug_model():
    torch.manual_seed(0)
    return VVAE(ModelConfig.debug()).eval()


@pytest.fixture
def random_volume():
    rng = np.random.default_rng(3)
    return Volume.from_array(rng.integers(0, 256, size=(5, 20, 24)).astype(np.uint8))


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
