import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from advsysid import simkit

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

ACCEPTANCE = {}


@pytest.fixture
def rng():
    return simkit.make_rng(12345)


def small_system(seed, n=4, m=2, r=3, target=0.6):
    return simkit.gen_system(n, m, r, target, simkit.make_rng(seed))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
