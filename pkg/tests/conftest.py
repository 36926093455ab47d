import copy
import json
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
GOLDEN = Path(__file__).resolve().parent / "golden"


def load_doc(name="basic.json"):
    return json.loads((SCENARIOS / name).read_text())


def small_doc(**vm):
    """The basic fixture shrunk for tests that run many sessions."""
    doc = copy.deepcopy(load_doc())
    doc["vm"].update({"chunk_size": 256, "chunk_count": 64, "page_count": 64})
    doc["vm"].update(vm)
    doc["transfer"].update({"chunks_per_tick": 16, "stop_threshold": 0.05})
    return doc


@pytest.fixture
def basic_doc():
    return load_doc()


@pytest.fixture
def small():
    return small_doc()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
