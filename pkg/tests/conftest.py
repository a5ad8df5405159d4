import sys
from pathlib import Path

import pytest
from hypothesis import settings

TESTS = Path(__file__).parent
sys.path.insert(0, str(TESTS))

DATA = TESTS / "data"

# fixed example sequence, so a run is reproducible from the source alone
settings.register_profile("repro", derandomize=True, print_blob=True)
settings.load_profile("repro")


@pytest.fixture
def toy_pre():
    return DATA / "toy_pre.safetensors"


@pytest.fixture
def toy_ft():
    return DATA / "toy_ft.safetensors"


@pytest.fixture
def toy_golden():
    return DATA / "toy_golden_up_proj.safetensors"


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
