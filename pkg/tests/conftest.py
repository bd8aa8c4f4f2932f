import time

import numpy as np
import pytest

from vctransfer.data import SyntheticScene, gen_clip
from vctransfer.net import ModelConfig

TINY = dict(frames=4, height=16, width=16, patch=4, dim=48, heads=4, depth=2, freq_dim=32, text_buckets=512)

_criteria: dict[str, tuple[int, str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, text): acceptance criterion number and description")


@pytest.fixture
def tiny_cfg():
    return ModelConfig(**TINY)


@pytest.fixture
def tiny_clip():
    scene = SyntheticScene(size=6, start=(2, 4), velocity=(2, 1), texture="gradient", frames=4, height=16, width=16)
    return gen_clip(scene, np.random.default_rng(3), clip_id="tiny")


@pytest.fixture
def desk_clip():
    return gen_clip(SyntheticScene(texture="gradient"), np.random.default_rng(0), clip_id="desk")


def _timed_phase(item):
    start = time.perf_counter()
    yield
    props = dict(item.user_properties)
    item.user_properties.append(("elapsed", props.get("elapsed", 0.0) + time.perf_counter() - start))


# setup is included so fixture-built models (the overfit run) count toward the reported time
pytest_runtest_setup = pytest.hookimpl(hookwrapper=True)(_timed_phase)
pytest_runtest_call = pytest.hookimpl(hookwrapper=True)(_timed_phase)


def pytest_runtest_logreport(report):
    marker = dict(report.user_properties).get("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    if report.when == "setup" and report.passed:
        return
    n, text = marker
    elapsed = dict(report.user_properties).get("elapsed", 0.0)
    _criteria[report.nodeid] = (n, text, "PASS" if report.passed else "FAIL", elapsed)


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            item.user_properties.append(("criterion", (m.args[0], m.args[1])))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n, text, status, elapsed in sorted(_criteria.values()):
        terminalreporter.write_line(f"criterion {n:>2} [{status}] {text} ({elapsed:.1f} s)")
