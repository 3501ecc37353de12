"""
Shared pytest fixtures.

Slow acceptance runs are marked @pytest.mark.slow and skipped unless
MADF_RUN_SLOW=1 is set.
"""

import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, ROOT)
sys.path.insert(0, os.path.join(ROOT, 'src'))


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training runs (set MADF_RUN_SLOW=1)")


def pytest_collection_modifyitems(config, items):
    if os.environ.get("MADF_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="slow; set MADF_RUN_SLOW=1 to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def micro_config():
    from model import ModelConfig
    return ModelConfig.preset("micro")


@pytest.fixture
def micro_model(micro_config):
    from model import build_model
    return build_model(micro_config, seed=3, dtype=np.float64)
