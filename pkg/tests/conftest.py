import numpy as np
import pytest

from defocus_restore.optics import OpticalConfig, build_kernel_bank


@pytest.fixture(scope="session")
def cfg():
    return OpticalConfig()


@pytest.fixture(scope="session")
def bank(cfg):
    return build_kernel_bank(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
