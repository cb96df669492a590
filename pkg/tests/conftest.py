import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


def pytest_runtest_logreport(report):
    """Print one PASS/FAIL line per acceptance criterion."""
    if "test_acceptance" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        status = "PASS" if report.passed else "FAIL"
        name = report.nodeid.split("::", 1)[-1]
        sys.stderr.write(f"ACCEPTANCE {name}: {status}\n")
