from __future__ import annotations

import sys

import pytest
from hypothesis import settings

from ratplus.attention import MixingParams
from ratplus.numerics import RopeParams, Rng

settings.register_profile("ratplus", deadline=None, max_examples=40, derandomize=True)
settings.load_profile("ratplus")


@pytest.fixture
def rng():
    return Rng(1234)


@pytest.fixture
def small_block(rng):
    """Mixing weights, input and rope for a 2-head block with model_dim 12."""
    params = MixingParams.init(12, 2, 6, rng, std=0.4)
    return params, rng.normal((24, 12)), RopeParams(6)



def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
