import os

import pytest
from hypothesis import HealthCheck, settings

from uomo.denoiser import ModelConfig, init_params
from uomo.diffusion import TrainConfig, make_schedule, train
from uomo.grid_store import synth_city
from uomo.samples import split_city

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", max_examples=150, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def pretrained():
    """Reference model pretrained for 200 steps on synthetic city 0, with its
    train and held-out sample sets."""
    traffic, users, poi = synth_city(0, 8, 8, 96 * 32, 15)
    train_set, held = split_city(traffic, users, poi, (8, 8), 64, 28, 96)
    cfg = ModelConfig()
    sched = make_schedule()
    params, _ = train(init_params(cfg, 0), train_set, cfg, sched, TrainConfig(steps=200, batch_size=32))
    return params, cfg, sched, train_set, held


# One summary line per acceptance criterion, in criterion order.
_CRITERIA: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or report.when != "call" and report.passed:
        return
    n, title = mark.args
    ok = report.passed and _CRITERIA.get(n, ("", "PASS", 0.0))[1] == "PASS"
    elapsed = _CRITERIA.get(n, ("", "", 0.0))[2] + (report.duration if report.when == "call" else 0.0)
    _CRITERIA[n] = (title, "PASS" if ok else "FAIL", elapsed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, elapsed = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title} ({elapsed:.1f}s)")
