from __future__ import annotations

import numpy as np
import pytest

from mglmm.model import ModelSpec, NaturalParams
from mglmm.simulate import SimConfig, simulate

# criterion number -> (title, passed); a criterion passes when all its tests pass
ACCEPTANCE: dict[int, tuple[str, bool]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(num, title): test belongs to acceptance criterion num")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or (rep.when != "call" and rep.passed):
        return
    num, title = mark.args
    ok = ACCEPTANCE.get(num, (title, True))[1]
    ACCEPTANCE[num] = (title, ok and rep.passed)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        title, ok = ACCEPTANCE[num]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {num:2d}. {title}")


def corr2(rho: float) -> np.ndarray:
    return np.array([[1.0, rho], [rho, 1.0]])


def small_truth(family: str, sd=0.3, rho=0.5, disp=2.0) -> tuple[ModelSpec, NaturalParams]:
    """k=2 model: y1 ~ 1 + x, y2 ~ 1."""
    spec = ModelSpec(family, ("a", "b"), (("x",), ()))
    d = None if family == "poisson" else np.array([disp, disp])
    truth = NaturalParams((np.array([0.5, 0.3]), np.array([0.2])), d, np.array([sd, sd]), corr2(rho))
    return spec, truth


@pytest.fixture(params=["poisson", "nb2", "cmp"])
def family(request):
    return request.param


@pytest.fixture
def small_data(family):
    spec, truth = small_truth(family)
    cfg = SimConfig(spec, truth, 60, "normal", seed=11)
    return simulate(cfg), cfg
