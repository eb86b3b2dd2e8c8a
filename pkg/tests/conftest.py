from __future__ import annotations

import os
from importlib import resources

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", deadline=None, max_examples=200, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def fixture_path():
    return resources.files("gpmsim.fixtures") / "mini_undo.trc"


@pytest.fixture(scope="session")
def fixture_trace(fixture_path):
    from gpmsim.trace import read_trace

    return read_trace(fixture_path)


@pytest.fixture(scope="session")
def table2_path():
    return resources.files("gpmsim.fixtures") / "table2.csv"
