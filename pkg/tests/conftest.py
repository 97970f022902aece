import os

os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import pytest  # noqa: E402
from hypothesis import settings  # noqa: E402

from bclip import numerics as nx  # noqa: E402

settings.register_profile("bclip", deadline=None, max_examples=40)
settings.load_profile("bclip")

_verdicts: dict = {}


def t64(a, grad=False):
    return nx.Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        detail = dict(report.user_properties).get("detail", "")
        _verdicts[report.nodeid.split("::")[-1]] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_verdicts, key=lambda n: (int(n.split("_")[2]), n)):
        outcome, detail = _verdicts[name]
        word = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"{name.replace('test_', '')}: {word}  {detail}".rstrip())
