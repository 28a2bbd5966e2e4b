import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from capfuzz.instruction import generate_instruction  # noqa: E402
from capfuzz.world import generate_scene  # noqa: E402


@pytest.fixture(scope="session")
def scenes():
    return [generate_scene(s) for s in range(12)]


@pytest.fixture(scope="session")
def cases(scenes):
    return [(sc, generate_instruction(sc, i)) for i, sc in enumerate(scenes)]


# One verdict line per acceptance criterion, printed after the run.
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
