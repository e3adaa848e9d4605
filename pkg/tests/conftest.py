import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from scenegraft.backend import make_schedule, make_toy_backend  # noqa: E402
from scenegraft.cards import reference_card, scene_card  # noqa: E402
from scenegraft.masks import make_threshold_stub_client  # noqa: E402


@pytest.fixture
def toy():
    return make_toy_backend(seed=0, latent_size=8)


@pytest.fixture
def toy32():
    return make_toy_backend(seed=0, latent_size=32)


@pytest.fixture
def sched10():
    return make_schedule(10)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def stub_seg():
    return make_threshold_stub_client(0.5)


@pytest.fixture(scope="session")
def scene64():
    return scene_card(64, seed=0)


@pytest.fixture(scope="session")
def ref64():
    return reference_card(64, seed=1)


_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and report.when in ("setup", "call"):
        if report.when == "call" or report.outcome != "passed":
            _ACCEPTANCE[report.nodeid] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, outcome in _ACCEPTANCE.items():
        name = nodeid.split("::")[-1]
        verdict = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[outcome]
        terminalreporter.write_line(f"{verdict}  {name}")
