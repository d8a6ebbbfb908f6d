import os
from pathlib import Path

import numpy as np
import pytest

# cached expensive artifacts live next to the repo unless overridden
os.environ.setdefault("PHOTOCLICK_CACHE", str(Path(__file__).resolve().parents[1] / ".cache"))

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
