import numpy as np
import pytest

from fewshot_htr.core import GrayImage, SupportSet
from fewshot_htr.synthgen import procedural_alphabet


def random_image(rng, width, height):
    return GrayImage(rng.integers(0, 256, size=(height, width), dtype=np.uint8))


@pytest.fixture(scope="session")
def small_support() -> SupportSet:
    """Four procedural classes with three shots each."""
    return procedural_alphabet(4, 3, seed=11)


@pytest.fixture(scope="session")
def alphabet12() -> SupportSet:
    return procedural_alphabet(12, 5, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# acceptance report: one PASS/FAIL line per numbered criterion

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
        prev = _CRITERIA.get(number, ("PASS", title))[0]
        # a criterion passes only if every test carrying its number passes
        _CRITERIA[number] = (status if prev == "PASS" else prev, title)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        status, title = _CRITERIA[number]
        terminalreporter.write_line(f"{status} criterion {number}: {title}")
