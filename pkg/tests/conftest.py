import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

_ACCEPTANCE: dict = {}


@pytest.fixture
def record_criterion():
    """Register the outcome of one acceptance criterion for the terminal summary."""
    def record(number: int, ok: bool, detail: str):
        _ACCEPTANCE[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")


# -- scenario fixtures (session scoped: plans take tens of seconds) ---------------------


@pytest.fixture(scope="session")
def cwh_config():
    from ccorbit.scenarios import bundled_scenario_path, load_scenario
    return load_scenario(bundled_scenario_path("cwh_rendezvous"))


@pytest.fixture(scope="session")
def nrho_config():
    from ccorbit.scenarios import bundled_scenario_path, load_scenario
    return load_scenario(bundled_scenario_path("nrho"))


@pytest.fixture(scope="session")
def cwh_scenario(cwh_config):
    from ccorbit.scenarios import build_scenario
    return build_scenario(cwh_config)


@pytest.fixture(scope="session")
def nrho_scenario(nrho_config):
    from ccorbit.scenarios import build_scenario
    return build_scenario(nrho_config)


@pytest.fixture(scope="session")
def cwh_plan(cwh_scenario):
    import time
    from ccorbit.scenarios import plan_scenario
    t0 = time.perf_counter()
    plan, sc = plan_scenario(cwh_scenario)
    return plan, sc, time.perf_counter() - t0


@pytest.fixture(scope="session")
def nrho_plan(nrho_scenario):
    import time
    from ccorbit.scenarios import plan_scenario
    t0 = time.perf_counter()
    plan, sc = plan_scenario(nrho_scenario)
    return plan, sc, time.perf_counter() - t0


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def cwh_cli_run(tmp_path_factory):
    """CWH plan plus a 1000-sample linear MC written through the CLI."""
    from ccorbit.cli import main
    run = tmp_path_factory.mktemp("cwh_run")
    assert main(["plan", "--scenario", "cwh_rendezvous", "--out", str(run)]) == 0
    assert main(["simulate", "--out", str(run), "--samples", "1000", "--seed", "7"]) == 0
    return run
