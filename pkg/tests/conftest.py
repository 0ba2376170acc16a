import re

import numpy as np
import pytest

from tabprobe import adapter, synthgen
from tabprobe.toymodel import ModelConfig, ToyTabPFN


@pytest.fixture(scope="session")
def tiny_net():
    net = ToyTabPFN(ModelConfig(n_layers=3, embed_dim=16, n_heads=2, seed=3))
    net.eval()
    return net


@pytest.fixture(scope="session")
def tiny_model(tiny_net):
    return adapter.toy_model(tiny_net)


@pytest.fixture
def compound_ds():
    return synthgen.gen_compound(64, 40, seed=5)


@pytest.fixture
def switch_ds():
    table = synthgen.random_switch_table(4, seed=1)
    return synthgen.gen_switch(table, 16, 8, seed=2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# ---------------------------------------------------------------- acceptance lines

_CRITERIA: dict[str, str] = {}


def _label(test_name: str) -> str:
    match = re.match(r"test_c(\d+)_(\w+)", test_name)
    return f"C{int(match[1]):02d} {match[2].replace('_', ' ')}" if match else test_name


@pytest.fixture
def verdict(request):
    """Record one acceptance line for the calling test, then assert on it."""
    label = _label(request.node.name)

    def record(ok: bool, detail: str) -> None:
        _CRITERIA[label] = f"{'PASS' if ok else 'FAIL'}  {label}: {detail}"
        assert ok, detail

    return record


def pytest_runtest_logreport(report):
    if "test_acceptance" not in report.nodeid or report.when not in ("setup", "call"):
        return
    label = _label(report.nodeid.split("::")[-1])
    if report.skipped:
        reason = report.longrepr[-1] if isinstance(report.longrepr, tuple) else str(report.longrepr)
        _CRITERIA.setdefault(label, f"SKIP  {label}: {reason}")
    elif report.failed:
        _CRITERIA.setdefault(label, f"FAIL  {label}: raised before a verdict ({report.longreprtext.splitlines()[-1]})")


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for label in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[label])
