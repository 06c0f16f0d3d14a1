import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("fedseg", max_examples=60, deadline=None)
settings.load_profile("fedseg")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_collection_modifyitems(items):
    # The acceptance module prints one line per criterion; keep it last.
    items.sort(key=lambda item: item.fspath.basename == "test_acceptance.py")


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
