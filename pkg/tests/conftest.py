import os
import re
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

from cosmicbell.pipeline import data_path, ingest_counts

settings.register_profile("repo", deadline=None, derandomize=True, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

REPO = Path(__file__).resolve().parents[1]

# acceptance criteria register one summary line each; printed at the end of the run
ACCEPTANCE_LINES = {}


@pytest.fixture(scope="session")
def table2():
    return ingest_counts(data_path("table2.csv"))


@pytest.fixture
def repo_root():
    return REPO


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES, key=lambda k: (int(re.match(r"\d+", k).group()), k)):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
