import pytest

from ecmtherm.hppc import HppcProfileSpec, generate_profile
from ecmtherm.presets import lifes2_aa_cell, lifes2_ocv, lifes2_parameter_table


@pytest.fixture(scope="session")
def cell():
    return lifes2_aa_cell()


@pytest.fixture(scope="session")
def table():
    return lifes2_parameter_table()


@pytest.fixture(scope="session")
def poly():
    return lifes2_ocv()


@pytest.fixture(scope="session")
def hppc_spec():
    return HppcProfileSpec()


@pytest.fixture(scope="session")
def hppc_trace(hppc_spec):
    return generate_profile(hppc_spec)


ACCEPTANCE_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per acceptance criterion."""

    def record(label, ok, detail):
        line = f"criterion {label}: {'PASS' if ok else 'FAIL'} | {detail}"
        print(line)
        request.config.stash.setdefault(ACCEPTANCE_LINES, []).append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
