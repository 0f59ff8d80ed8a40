import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

# Kernels are JIT-compiled on first use, so per-example deadlines are meaningless.
settings.register_profile(
    "tilekit", deadline=None, max_examples=40,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("tilekit")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def isolated_db(tmp_path, monkeypatch):
    monkeypatch.setenv("TILEKIT_DB", str(tmp_path / "tuning.ndjson"))


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
