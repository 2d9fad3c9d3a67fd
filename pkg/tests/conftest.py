import numpy as np
import pytest
from hypothesis import settings

from c3owd.numeric import make_rng

settings.register_profile("repo", max_examples=60, deadline=None)
settings.load_profile("repo")


@pytest.fixture
def rng():
    return make_rng(1234)


def finite_arrays(shape, lo=-3.0, hi=3.0):
    from hypothesis import strategies as st
    from hypothesis.extra.numpy import arrays
    return arrays(np.float64, shape, elements=st.floats(lo, hi, allow_nan=False, allow_infinity=False))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[2].rstrip(':'))):
            terminalreporter.write_line(line)
