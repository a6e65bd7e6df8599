import os

import numpy as np
import pytest
from hypothesis import settings

from billiards.core import Ball, GameLabels, Layout, TableGeometry
from billiards.synth import SynthConfig, generate_synthetic

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def make_layout(balls, lid="t", labels=None):
    return Layout(lid, tuple(Ball(n, float(x), float(y)) for n, x, y in balls), labels)


@pytest.fixture(scope="session")
def geom():
    return TableGeometry()


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(SynthConfig(count=120, seed=11))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE = []


def record(cid, passed, detail):
    ACCEPTANCE.append((cid, bool(passed), detail))
    print(f"[{'PASS' if passed else 'FAIL'}] {cid}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid, passed, detail in sorted(ACCEPTANCE, key=lambda r: int(r[0][1:])):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} {cid}: {detail}")
