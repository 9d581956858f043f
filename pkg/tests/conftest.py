import numpy as np
import pytest

from splatslam.geometry import CameraIntrinsics, Pose, quat_normalize


def random_pose(rng, max_angle=np.pi * 0.95, max_t=2.0) -> Pose:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = rng.uniform(0, max_angle)
    q = np.concatenate([[np.cos(ang / 2)], np.sin(ang / 2) * axis])
    return Pose(quat_normalize(q), rng.uniform(-max_t, max_t, 3))


def rot_matrix(axis, angle) -> np.ndarray:
    """Rodrigues formula, independent of the quaternion code."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    K = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_intr():
    return CameraIntrinsics(40.0, 40.0, 15.5, 11.5, 32, 24)


def random_gaussians(rng, n, center_depth=3.0, spread=1.0):
    from splatslam.splat import Gaussians

    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    means = np.c_[rng.uniform(-spread, spread, (n, 2)), rng.uniform(center_depth - 0.5, center_depth + 0.5, n)]
    return Gaussians(means, rng.uniform(0.05, 0.3, (n, 3)), q, rng.normal(0, 1, n), rng.uniform(0, 1, (n, 3)))


def pytest_terminal_summary(terminalreporter):
    from support import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
