from __future__ import annotations

import numpy as np
import pytest

from rsgrpo.env import DatasetSpec, generate_dataset
from rsgrpo.grammar import Vocabulary

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(lines):
        terminalreporter.write_line(line[1])


@pytest.fixture
def report_criterion(request):
    """Record one pass/fail line for the acceptance summary, then assert on it."""
    def report(number: int, name: str, passed: bool, detail: str) -> None:
        line = f"criterion {number:2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        print(line)
        request.config.stash[ACCEPTANCE].append((number, line))
        assert passed, line
    return report


@pytest.fixture
def vocab() -> Vocabulary:
    return Vocabulary()


@pytest.fixture
def small_episodes():
    spec = DatasetSpec(episodes=200, two_hop_rate=0.5)
    return generate_dataset(spec, np.random.default_rng(123))
