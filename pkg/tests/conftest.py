import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from riskbeam.numerics import SeededRng  # noqa: E402

ACCEPTANCE = {}


def record_criterion(number: int, name: str, passed: bool, detail: str = ""):
    ACCEPTANCE[number] = (name, passed, detail)


@pytest.fixture
def rng():
    return SeededRng(20240601, 99).generator(0)


def cn(gen, shape):
    return (gen.standard_normal(shape) + 1j * gen.standard_normal(shape)) / np.sqrt(2)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        name, ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k} [{'PASS' if ok else 'FAIL'}] {name}: {detail}")
