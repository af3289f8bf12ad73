import sys
from pathlib import Path

import numpy as np
import pytest

from dcprune.synthnet import GeneratorConfig, init_generator

sys.path.insert(0, str(Path(__file__).parent))


TINY = dict(z_dim=6, w_dim=6, mapping_layers=2, resolutions=(4, 8), channels_per_resolution=(4, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return GeneratorConfig(**TINY)


@pytest.fixture
def tiny_gen(tiny_config):
    return init_generator(tiny_config, seed=7)


@pytest.fixture
def small_gen():
    cfg = GeneratorConfig(z_dim=8, w_dim=8, resolutions=(4, 8, 16), channels_per_resolution=(8, 6, 4))
    return init_generator(cfg, seed=3)


# PASS/FAIL lines from tests/test_acceptance.py, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
