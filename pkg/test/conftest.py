"""Shared pytest fixtures for the library tests"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from lib import tensor  # noqa: E402
from lib.gdc import GDCConfig  # noqa: E402
from lib.tensor import Rng  # noqa: E402
from lib.ugdc import UGDCConfig  # noqa: E402


@pytest.fixture(autouse=True)
def default_precision():
    """CLI runs switch the process-wide dtype and debug flag; restore them"""
    yield
    tensor.set_default_dtype('float32')
    tensor.set_debug(False)


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def tiny_config():
    """Two-level UGDC with a GDC mid stage, small enough for 16x16 inputs"""
    return UGDCConfig(depth=2, base_channels=4, gdc_stages=('mid',), gdc=GDCConfig(grid=(2, 2), embed_dim=4))
