import time

import numpy as np
import pytest

from egd import bench

from egd.diffusion import build_schedule
from egd.molecule import default_rules
from egd.tasks import build_world, make_run_config

ACCEPTANCE: list[tuple[int, bool, str]] = []


def record(number: int, ok: bool, detail: str) -> None:
    """Remember one acceptance outcome; all of them are printed at the end of the session."""
    ACCEPTANCE.append((number, bool(ok), detail))
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def rules():
    return default_rules()


@pytest.fixture(scope="session")
def schedule():
    return build_schedule("linear", 1000)


@pytest.fixture(scope="session")
def world():
    return build_world()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ablations(world):
    """T1 and T2 at N=32, R=10 over seeds 0..19, with the wall time of each batch."""
    out = {}
    for task in ("T1", "T2"):
        cfg = make_run_config(task, world, N=32, R=10)
        t0 = time.perf_counter()
        out[task] = (bench.ablate(world, cfg, range(20), task), time.perf_counter() - t0)
    return out
