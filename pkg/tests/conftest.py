"""Pytest configuration for additional test options."""
import numpy as np
import pytest


def pytest_addoption(parser):
    """Add custom pytest command line options."""
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Run slow statistical tests"
    )


def pytest_configure(config):
    """Register custom markers."""
    config.addinivalue_line(
        "markers", "slow: marks tests as slow (deselect with '-m \"not slow\"')"
    )


def pytest_collection_modifyitems(config, items):
    """Skip tests based on command line options."""
    if not config.getoption("--run-slow"):
        skip_slow = pytest.mark.skip(reason="need --run-slow option to run")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip_slow)


@pytest.fixture
def identifiable_q():
    """3 x 9 Q in the constraint set: two identity blocks plus one shared column per state."""
    return np.array(
        [
            [1, 0, 0, 1, 0, 0, 1, 0, 1],
            [0, 1, 0, 0, 1, 0, 1, 1, 0],
            [0, 0, 1, 0, 0, 1, 0, 1, 1],
        ],
        dtype=np.uint8,
    )
