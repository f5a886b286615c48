import os

os.environ.setdefault("UAFUSE_DEBUG", "1")

import numpy as np
import pytest

from uafuse.config import NetworkConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net_config():
    return NetworkConfig(num_classes=3, width=4, aspp_branch_width=2, dilations=(1, 2),
                         se_reduction=2, adapt_width=4, min_spatial=1)


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion."""
    def record(number: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[number] = (bool(ok), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 8):
        if n in _ACCEPTANCE:
            ok, detail = _ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n}: NOT RUN")
