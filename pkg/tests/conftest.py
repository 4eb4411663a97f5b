import pytest

from stragglerlab.config import from_dict


def make_config(**sections):
    """Config from section dicts, e.g. make_config(run={"workers": 4})."""
    return from_dict(sections)


@pytest.fixture
def small_probe():
    """Tiny probe run: 4 workers, 6 iterations, 40 items."""
    return make_config(run={"workers": 4, "iterations": 6}, workload={"name": "probe", "size": 40},
                       cluster={"blocks_per_worker": 5})


# -- acceptance reporting ----------------------------------------------------

CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """record(n, ok, detail): log one acceptance line, then fail the test if not ok."""

    def record(n: int, ok: bool, detail: str) -> None:
        CRITERIA[n] = (bool(ok), detail)
        print(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
