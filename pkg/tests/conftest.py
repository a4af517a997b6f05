import pytest

from quatera_rsi.catalog import build_kvector, build_pair_database, load_catalog
from quatera_rsi.simulator import DEFAULT_CAMERA

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def sky():
    """Runtime catalog (magnitude < 5), pair database and k-vector."""
    cat = load_catalog(None, 5.0)
    db = build_pair_database(cat, DEFAULT_CAMERA.fov_diagonal)
    return cat, db, build_kvector(db)


@pytest.fixture
def verdict(request):
    """``verdict(number, title, passed, detail)`` records one PASS/FAIL line for the summary."""
    lines = request.config.stash.setdefault(_VERDICTS, {})

    def record(number, title, passed, detail=""):
        line = f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
        lines[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
