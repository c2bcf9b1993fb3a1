import numpy as np
import pytest

from cliqueloop.keyframes import CameraIntrinsics, Keyframe, Pose, SequenceDataset


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    from cliqueloop.keyframes import quat_to_matrix

    return quat_to_matrix(q)


def make_dataset(name="seq", n=6, n_kp=20, dim=8, seed=0, width=640, height=480):
    rng = np.random.default_rng(seed)
    kfs = []
    for i in range(n):
        pose = Pose(rng.normal(size=3), rng.normal(size=4))
        kp = rng.uniform([0, 0], [width - 1, height - 1], (n_kp, 2))
        desc = rng.normal(size=(n_kp, dim))
        kfs.append(Keyframe(i * 2, name, pose, kp, desc))
    return SequenceDataset(name, CameraIntrinsics(500.0, 500.0, 320.0, 240.0), width, height, kfs)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_dataset():
    return make_dataset()


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])
