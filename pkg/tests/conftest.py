from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"


@pytest.fixture
def arctic_wav():
    """CMU ARCTIC utterance a0007 (16 kHz, 4 s); see data/COPYING.arctic."""
    return DATA / "arctic_a0007.wav"


# -- acceptance summary: one line per criterion -------------------------------

_CRITERIA = {}


def pytest_runtest_logreport(report):
    label = dict(report.user_properties).get("criterion")
    if label is None:
        return
    if report.when == "call" or report.failed:
        previous = _CRITERIA.get(label, "PASS")
        _CRITERIA[label] = "FAIL" if report.failed or previous == "FAIL" else "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_CRITERIA, key=lambda s: int(s.split(".")[0])):
        terminalreporter.write_line(f"{_CRITERIA[label]}  criterion {label}")
