import numpy as np
import pytest

from kmorph.kinematics import load_schema
from kmorph.pipeline import PipelineConfig
from kmorph.regressor import TrainConfig


@pytest.fixture(params=["box_a", "box_b", "box_c", "door"])
def task_name(request):
    return request.param


@pytest.fixture
def schema_c():
    return load_schema("box_c")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_config(task="box_a", n_data=40, **kw) -> PipelineConfig:
    """Low-resolution pipeline for fast end-to-end tests (clouds 128x96, network input 64x48)."""
    kw.setdefault("train", TrainConfig(epochs=2, batch_size=16, seed=0))
    kw.setdefault("n_aug", min(8, n_data))
    kw.setdefault("net_factor", 2)
    kw.setdefault("workers", 1)
    return PipelineConfig.for_task(task, cloud_size=(128, 96), n_data=n_data, **kw)


# --- acceptance summary ----------------------------------------------------------

def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(label): acceptance criterion reported in the terminal summary")


_verdicts: dict[str, tuple[str, str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    label = str(marker.args[0])
    detail = dict(item.user_properties).get("detail", "")
    failed = report.failed or (report.when == "call" and report.skipped)
    if failed or report.when == "call":
        if failed and not detail:
            detail = f"{report.when} error: {call.excinfo.typename if call.excinfo else 'failed'}"
        if label not in _verdicts or _verdicts[label][0] == "PASS":
            _verdicts[label] = ("FAIL" if failed else "PASS", detail)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for label in sorted(_verdicts, key=lambda s: int(s)):
        status, detail = _verdicts[label]
        terminalreporter.write_line(f"{status} criterion {label}: {detail}")
