import numpy as np
import pytest

from dcelanm.network import NetworkConfig
from dcelanm.tensor import default_dtype


@pytest.fixture
def fp64():
    with default_dtype(np.float64):
        yield


def tiny_config(**kw) -> NetworkConfig:
    """A 64x64 network small enough for unit tests."""
    base = dict(
        encoder_filters=(4, 8, 8, 16, 16),
        decoder_filters=(16, 8, 8, 4),
        path_repeats=(2, 1, 1, 1),
        input_side=64,
        patch_size=2,
        mae_dim=16,
        mae_depth=1,
        mae_dec_dim=16,
        mae_dec_depth=1,
        mae_heads=2,
    )
    base.update(kw)
    return NetworkConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
