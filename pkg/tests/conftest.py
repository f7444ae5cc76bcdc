import numpy as np
import pytest

from photon_unmix.model import AcquisitionConfig

# One summary line per acceptance criterion, printed at the end of the run.
CRITERIA = {}


def record(number: int, name: str, ok: bool, detail: str = "") -> None:
    prev = CRITERIA.get(number)
    ok_all = ok if prev is None else (prev[1] and ok)
    details = [d for d in ((prev[2] if prev else ""), detail) if d]
    CRITERIA[number] = (name, ok_all, "; ".join(details))


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        name, ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number} [{name}]: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture
def config():
    return AcquisitionConfig()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
