import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from eigenprune.data import load_task, split  # noqa: E402
from eigenprune.model import ModelConfig, init_model  # noqa: E402


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(n_layers=2, n_heads=2, d_model=16, d_ff=32, seed=3)


def sharpen(model, scale=10.0):
    # Random 0.02-scale weights give near-uniform attention; scaling up makes
    # curvature visible to finite-difference and patching checks.
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "ln" not in name:
                p.mul_(scale)
    return model


@pytest.fixture
def small_model(small_config):
    return sharpen(init_model(small_config))


@pytest.fixture(scope="session")
def sum_small_split():
    return split(load_task("sum-small"), 0.8, 0)


@pytest.fixture(scope="session")
def surrogate(sum_small_split):
    """The 1-layer model trained on INT-SUM-small with the surrogate recipe."""
    from eigenprune.harness import SURROGATE_MODEL, SURROGATE_TRAIN
    from eigenprune.trainer import train

    tr, _ = sum_small_split
    return train(init_model(SURROGATE_MODEL), tr, SURROGATE_TRAIN).model


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")
    config._criteria = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    props = dict(report.user_properties)
    if "criterion" in props:
        store = pytest_runtest_logreport.config._criteria
        store[props["criterion"]] = (props["title"], report.outcome, props.get("detail", ""), report.duration)


def pytest_sessionstart(session):
    pytest_runtest_logreport.config = session.config


def pytest_terminal_summary(terminalreporter, config):
    if not config._criteria:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(config._criteria):
        title, outcome, detail, dur = config._criteria[n]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {title}  ({dur:.1f}s) {detail}")


@pytest.fixture
def criterion(request):
    marker = request.node.get_closest_marker("criterion")
    n, title = marker.args
    request.node.user_properties.append(("criterion", n))
    request.node.user_properties.append(("title", title))

    def detail(text):
        request.node.user_properties.append(("detail", text))

    return detail
