import json
from pathlib import Path

import pytest

from psychoforge import agents, persona, scales

FIXTURES = Path(__file__).parent / "fixtures"

_acceptance: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(n, title): acceptance criterion n")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    marker = getattr(report, "acceptance", None)
    if marker is not None:
        n, title = marker
        _acceptance[n] = (title, "PASS" if report.outcome == "passed" else "FAIL")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    m = item.get_closest_marker("acceptance")
    if m is not None:
        rep.acceptance = (m.args[0], m.args[1])


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_acceptance):
        title, status = _acceptance[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}")


@pytest.fixture(scope="session")
def bfi2():
    return scales.bundled_scale("bfi2")


@pytest.fixture(scope="session")
def mm():
    return scales.bundled_scale("mini_markers")


@pytest.fixture(scope="session")
def table():
    return persona.load_expansion_table()


@pytest.fixture(scope="session")
def batteries():
    return persona.load_scenarios()


@pytest.fixture(scope="session")
def crosswalk():
    return agents.load_crosswalk()


@pytest.fixture(scope="session")
def example_profile(bfi2):
    doc = json.loads((FIXTURES / "prompts" / "profile.json").read_text())
    rv = scales.ResponseVector("BFI2", dict(zip(bfi2.item_ids, doc["bfi2"])))
    return rv
