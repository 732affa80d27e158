import numpy as np
import pytest

from oclreid.core import BBox, Observation


def make_obs(rng, track_id=1, label=0, vis=None, n_parts=10, d_raw=32, frame=0):
    if vis is None:
        vis = np.zeros(n_parts, dtype=bool)
        vis[:5] = True
    raw = rng.normal(size=(n_parts, d_raw))
    return Observation(track_id, raw, vis, BBox(320.0, 240.0, 80.0, 176.0), label, frame)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
