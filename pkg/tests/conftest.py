"""Shared fixtures: the default world, its trained victim, and both kernel backends."""

import numpy as np
import pytest

from loralab.kernels import numba_impl, numpy_impl
from loralab.victim import VictimDataConfig, train_victim, victim_datasets
from loralab.worldgen import GeneratorConfig, TaskWorld

BACKENDS = {"numpy": numpy_impl, "numba": numba_impl}


@pytest.fixture(params=sorted(BACKENDS))
def backend(request):
    """Each kernel implementation, imported directly so both run in one session."""
    return BACKENDS[request.param]


@pytest.fixture(scope="session")
def world():
    return TaskWorld()


@pytest.fixture(scope="session")
def generator():
    return GeneratorConfig()


@pytest.fixture(scope="session")
def victim_bundle(world):
    model, acc = train_victim(world)
    train, test = victim_datasets(world, VictimDataConfig())
    return model, acc, train, test


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one verdict line per acceptance criterion; printed in the terminal summary."""
    return request.config.stash.setdefault(_ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, None)
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    def order(line):
        tag = line.split()[1].rstrip(":")
        digits = "".join(ch for ch in tag if ch.isdigit())
        return (0, int(digits), tag) if line.startswith("CRITERION") else (1, 0, tag)

    for line in sorted(lines, key=order):
        terminalreporter.write_line(line)
