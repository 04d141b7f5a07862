import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pvdse import pv_models as pm
from pvdse import scenarios as sc
from pvdse.preprocessing import from_trajectory
from pvdse.simulator import simulate

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def ident_data():
    """Noiseless forward-difference regression data for both kinds."""
    out = {}
    for kind in pm.KINDS:
        trajs, _ = simulate(sc.identification_scenario(kind, seed=0))
        out[kind] = from_trajectory(trajs[0], None, "forward")
    return out


@pytest.fixture(scope="session")
def held_out_data():
    out = {}
    for kind in pm.KINDS:
        trajs, _ = simulate(sc.identification_scenario(kind, seed=1))
        out[kind] = from_trajectory(trajs[0], None, "forward")
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> [passed, title, details]
CRITERIA: dict = {}


@pytest.fixture
def detail(request) -> dict:
    """Measured values reported next to the criterion's pass/fail line."""
    out: dict = {}
    request.node.criterion_detail = out
    return out


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call":
        return
    number, title = mark.args
    entry = CRITERIA.setdefault(number, [True, title, []])
    entry[0] = entry[0] and report.passed
    info = getattr(item, "criterion_detail", {})
    if report.failed:
        info = {**info, "error": str(call.excinfo.value).splitlines()[0] if call.excinfo else ""}
    entry[2].append(info)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        passed, title, info = CRITERIA[number]
        text = "; ".join(str(i) for i in info)
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {title}  {text}")
