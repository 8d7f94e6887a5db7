import numpy as np
import pytest
import torch

from mudar.model import ModelConfig

torch.set_num_threads(1)


def tiny_config(num_classes=3, channels=3, window_len=36, slope=0.2):
    return ModelConfig(
        in_channels=channels,
        window_len=window_len,
        num_classes=num_classes,
        filters=(2, 3, 2),
        kernel_sizes=(5, 5, 5),
        fc=(8, 4),
        fc_negative_slope=slope,
    )


@pytest.fixture
def tiny():
    return tiny_config()


@pytest.fixture
def batch():
    rng = np.random.default_rng(0)
    return rng.normal(size=(4, 3, 36))


# -- acceptance reporting ------------------------------------------------------------

_CRITERIA: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not rep.failed:
        return
    number, title = mark.args
    status = "PASS" if rep.passed else "FAIL"
    # a criterion fails if any phase of any of its tests fails
    if _CRITERIA.get(number, ("", "PASS"))[1] == "FAIL":
        status = "FAIL"
    _CRITERIA[number] = (title, status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, status = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d} {status}: {title}")
