import numpy as np
import pytest

from rlfolio import allocators, synth_gbm


@pytest.fixture(autouse=True)
def _verify_kkt():
    # Every qp_solve call in the suite is re-checked by the independent
    # KKT residual routine.
    allocators.VERIFY_KKT = True
    yield
    allocators.VERIFY_KKT = False


@pytest.fixture
def small_market():
    """4 assets, 300 trading days, mild drift on the first asset."""
    return synth_gbm(4, 300, [0.0008, 0.0, 0.0, -0.0002], 0.01, seed=42)


@pytest.fixture
def flat_market():
    """Constant prices: every relative is exactly one."""
    return synth_gbm(3, 120, 0.0, 0.0, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
