import os

import pytest
from hypothesis import HealthCheck, settings

from levicav import cli
from levicav.params import TWO_PI, SystemParams, calibrate_g0

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=400, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def defaults() -> SystemParams:
    return SystemParams()


@pytest.fixture(scope="session")
def calibrated(defaults) -> SystemParams:
    """Bundled configuration: g0 set so the y cooling rate at the node is 2 pi x 1.3 kHz."""
    sys_ = cli.parse_config(cli.default_config_path()).system
    assert sys_.coupling.g0 == pytest.approx(calibrate_g0(defaults, TWO_PI * 1.3e3), rel=1e-12)
    return sys_


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
