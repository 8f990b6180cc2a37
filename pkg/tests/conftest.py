import pytest
from hypothesis import HealthCheck, settings

from mhdd import codec as cd
from mhdd import device as dev

settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def params():
    return dev.ModelParams()


@pytest.fixture(scope="session")
def codec():
    return cd.LevelCodec()


def pytest_configure(config):
    config._acceptance = []


@pytest.fixture
def acceptance(request):
    """Record (criterion, passed, detail) for the end-of-run summary."""
    log = request.config._acceptance

    def record(num, ok, detail):
        log.append((num, bool(ok), detail))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    log = getattr(config, "_acceptance", [])
    if not log:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(log, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
