"""Shared pytest setup: repo root on sys.path, markers, common fixtures."""

import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from src.tools.rng import CounterStream  # noqa: E402


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running statistical or end-to-end test")


@pytest.fixture
def rng():
    return CounterStream(0, "analysis")
