import warnings

import numpy as np
import pytest
from hypothesis import settings

from svrecon.motion_sim import make_rng

settings.register_profile("svrecon", max_examples=40, deadline=None)
settings.load_profile("svrecon")


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_overlap_warnings():
    # slices moved partly outside the volume warn; expected in most tests
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", "simulated slice does not overlap", RuntimeWarning)
        yield


def random_pose(rng, center=(8.0, 8.0, 8.0), rot_deg=20.0, shift=2.0):
    from svrecon.geometry import RigidTransform

    r = RigidTransform.from_params(rng.normal(0.0, rot_deg / np.sqrt(3), 3)).rotation
    c = np.asarray(center, dtype=np.float64)
    return RigidTransform(r, c - r @ c + rng.uniform(-shift, shift, 3))


# one line per acceptance criterion, printed after the run
ACCEPTANCE = {}


def record_acceptance(number, passed, detail):
    ACCEPTANCE[number] = f"acceptance {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
