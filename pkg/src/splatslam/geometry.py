"""Rigid-body algebra, pinhole camera model and point-cloud helpers.

Poses are camera/body-to-world transforms stored as a unit quaternion
``(w, x, y, z)`` plus a translation. Twists are ordered ``(rho, phi)``:
translational part first, rotational part second.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import factorial

import numpy as np
from scipy.spatial import cKDTree

SMALL_ANGLE = 1e-6


class LogMapSingularity(ValueError):
    pass


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# --------------------------------------------------------------------------
# quaternion helpers (w, x, y, z)
# --------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product, broadcasting over leading axes."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for (..., 4) quaternions; input need not be normalized."""
    q = quat_normalize(q)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns the quaternion with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def so3_exp_quat(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    if theta < SMALL_ANGLE:
        # sin(t/2)/t ~ 1/2 - t^2/48
        k = 0.5 - theta * theta / 48.0
        q = np.array([1.0 - theta * theta / 8.0, *(k * phi)])
    else:
        q = np.array([np.cos(0.5 * theta), *(np.sin(0.5 * theta) / theta * phi)])
    return quat_normalize(q)


def so3_log_quat(q: np.ndarray) -> np.ndarray:
    """Rotation vector of a unit quaternion; angle in [0, pi]."""
    q = np.asarray(q, dtype=np.float64)
    if q[0] < 0:
        q = -q
    w, v = q[0], q[1:]
    s = np.linalg.norm(v)
    if s < SMALL_ANGLE:
        # theta = 2 atan2(s, w) ~ 2 s / w
        return (2.0 / w - 2.0 * s * s / (3.0 * w**3)) * v
    theta = 2.0 * np.arctan2(s, w)
    return theta / s * v


def so3_left_jacobian(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    t2 = theta * theta
    return np.eye(3) + 2 * np.sin(0.5 * theta) ** 2 / t2 * K + (theta - np.sin(theta)) / (t2 * theta) * K @ K


def so3_left_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    t2 = theta * theta
    c = (1.0 - theta * np.sin(theta) / (4.0 * np.sin(0.5 * theta) ** 2)) / t2
    return np.eye(3) - 0.5 * K + c * K @ K


# --------------------------------------------------------------------------
# Pose / Twist
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Twist:
    rho: np.ndarray
    phi: np.ndarray

    @classmethod
    def from_vector(cls, v) -> "Twist":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3].copy(), v[3:6].copy())

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rho, self.phi])


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t`` with R held as a unit quaternion."""

    q: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=np.float64).reshape(4))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3].copy())

    @classmethod
    def from_rt(cls, R: np.ndarray, t) -> "Pose":
        return cls(matrix_to_quat(R), np.asarray(t, dtype=np.float64).copy())

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return inverse(self)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.R.T + self.t

    def angle(self) -> float:
        """Rotation angle in radians, in [0, pi]."""
        return rotation_angle(self)

    def __repr__(self) -> str:
        return f"Pose(q={np.array2string(self.q, precision=6)}, t={np.array2string(self.t, precision=6)})"


def compose(a: Pose, b: Pose) -> Pose:
    q = quat_multiply(a.q, b.q)
    q = q / np.linalg.norm(q)
    return Pose(q, a.R @ b.t + a.t)


def inverse(a: Pose) -> Pose:
    qi = a.q * np.array([1.0, -1.0, -1.0, -1.0])
    return Pose(qi, -(quat_to_matrix(qi) @ a.t))


def rotation_angle(p: Pose) -> float:
    w = min(abs(p.q[0]), 1.0)
    s = np.linalg.norm(p.q[1:])
    return float(2.0 * np.arctan2(s, w))


def se3_exp(twist) -> Pose:
    """Exponential map; accepts a ``Twist`` or a 6-vector ``(rho, phi)``."""
    if isinstance(twist, Twist):
        rho, phi = twist.rho, twist.phi
    else:
        v = np.asarray(twist, dtype=np.float64)
        rho, phi = v[:3], v[3:]
    return Pose(so3_exp_quat(phi), so3_left_jacobian(phi) @ rho)


def se3_log(pose: Pose) -> Twist:
    q = pose.q if pose.q[0] >= 0 else -pose.q
    if q[0] <= 0.0:
        raise LogMapSingularity("log map singularity: rotation angle is pi")
    phi = so3_log_quat(q)
    return Twist(so3_left_jacobian_inv(phi) @ pose.t, phi)


def se3_log_vec(pose: Pose) -> np.ndarray:
    return se3_log(pose).vector()


def _q_coefficients(theta: float) -> tuple[float, float, float]:
    if theta < 0.5:
        # power series; the closed forms cancel catastrophically near zero
        t2 = theta * theta
        a = b = d = 0.0
        p = 1.0
        for m in range(8):
            a += (-1) ** m * p / factorial(2 * m + 3)
            b += (-1) ** m * p / factorial(2 * m + 4)
            d += (-1) ** m * (m + 1) * p / factorial(2 * m + 5)
            p *= t2
        return a, b, d
    t2, t3 = theta * theta, theta**3
    s, c = np.sin(theta), np.cos(theta)
    return (
        (theta - s) / t3,
        (t2 + 2 * c - 2) / (2 * t2 * t2),
        (2 * theta - 3 * s + theta * c) / (2 * t2 * t3),
    )


def _se3_q_matrix(rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Off-diagonal block of the SE(3) left Jacobian."""
    a, b, d = _q_coefficients(float(np.linalg.norm(phi)))
    P, R = skew(phi), skew(rho)
    PR, RP, PRP = P @ R, R @ P, P @ R @ P
    return 0.5 * R + a * (PR + RP + PRP) + b * (P @ PR + RP @ P - 3 * PRP) + d * (PRP @ P + P @ PRP)


def se3_left_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    rho, phi = xi[:3], xi[3:]
    Ji = so3_left_jacobian_inv(phi)
    Q = _se3_q_matrix(rho, phi)
    out = np.zeros((6, 6))
    out[:3, :3] = Ji
    out[3:, 3:] = Ji
    out[:3, 3:] = -Ji @ Q @ Ji
    return out


def se3_right_jacobian_inv(xi: np.ndarray) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi))


def adjoint(p: Pose) -> np.ndarray:
    """Adjoint for (rho, phi) ordering: Ad_T exp(x) = T exp(x) T^-1."""
    R = p.R
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, 3:] = R
    A[:3, 3:] = skew(p.t) @ R
    return A


def pose_distance(a: Pose, b: Pose) -> tuple[float, float]:
    """(translation error [m], rotation error [rad]) between two poses."""
    d = compose(inverse(a), b)
    return float(np.linalg.norm(a.t - b.t)), rotation_angle(d)


# --------------------------------------------------------------------------
# camera model
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (self.width > 0 and self.height > 0):
            raise ValueError("image size must be positive")

    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics after ``factor``x block-average downsampling (pixel centers at integers)."""
        f = float(factor)
        return CameraIntrinsics(
            self.fx / f,
            self.fy / f,
            (self.cx + 0.5) / f - 0.5,
            (self.cy + 0.5) / f - 0.5,
            self.width // factor,
            self.height // factor,
            self.depth_scale,
        )


def project(points_cam: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points (N,3) to pixel coordinates (N,2)."""
    p = np.asarray(points_cam, dtype=np.float64)
    z = p[:, 2]
    return np.stack([intr.fx * p[:, 0] / z + intr.cx, intr.fy * p[:, 1] / z + intr.cy], axis=1)


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.colors is None:
            self.colors = np.zeros_like(self.points)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def normal_valid(self) -> np.ndarray:
        if self.normals is None:
            return np.zeros(len(self), dtype=bool)
        return np.all(np.isfinite(self.normals), axis=1)

    def transformed(self, T: Pose) -> "PointCloud":
        R = T.R
        normals = None if self.normals is None else self.normals @ R.T
        return PointCloud(self.points @ R.T + T.t, self.colors.copy(), normals)

    def select(self, mask) -> "PointCloud":
        normals = None if self.normals is None else self.normals[mask]
        return PointCloud(self.points[mask], self.colors[mask], normals)

    @staticmethod
    def concatenate(clouds: list["PointCloud"]) -> "PointCloud":
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        pts = np.concatenate([c.points for c in clouds])
        cols = np.concatenate([c.colors for c in clouds])
        if all(c.normals is not None for c in clouds):
            return PointCloud(pts, cols, np.concatenate([c.normals for c in clouds]))
        return PointCloud(pts, cols)


def valid_depth_mask(depth: np.ndarray, max_depth: float = 20.0) -> np.ndarray:
    return (depth > 0) & (depth <= max_depth) & np.isfinite(depth)


def backproject(
    depth: np.ndarray,
    intr: CameraIntrinsics,
    pose: Pose | None = None,
    color: np.ndarray | None = None,
    max_depth: float = 20.0,
    mask: np.ndarray | None = None,
) -> PointCloud:
    """Lift valid depth pixels to 3D, expressed in the frame ``pose`` maps into."""
    depth = np.asarray(depth, dtype=np.float64)
    valid = valid_depth_mask(depth, max_depth)
    if mask is not None:
        valid &= mask
    v, u = np.nonzero(valid)
    z = depth[v, u]
    pts = np.stack([(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z], axis=1)
    cols = color[v, u].astype(np.float64) if color is not None else None
    cloud = PointCloud(pts, cols)
    if pose is not None:
        cloud = cloud.transformed(pose)
    return cloud


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Centroid per occupied voxel, in lexicographic voxel order."""
    if len(cloud) == 0 or voxel <= 0:
        return cloud
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    n = len(counts)
    pts = np.zeros((n, 3))
    cols = np.zeros((n, 3))
    np.add.at(pts, inv, cloud.points)
    np.add.at(cols, inv, cloud.colors)
    return PointCloud(pts / counts[:, None], cols / counts[:, None])


def estimate_normals(cloud: PointCloud, k: int, viewpoint=None) -> PointCloud:
    """PCA normals from k nearest neighbours, flipped toward ``viewpoint``.

    ``viewpoint`` is a 3-vector or an (N,3) array of per-point sensor origins.
    Points whose neighbourhood has rank < 2 get NaN normals.
    """
    n = len(cloud)
    if k > n:
        raise ValueError(f"need at least k={k} points for normal estimation, got {n}")
    if k < 3:
        raise ValueError("k must be >= 3")
    pts = cloud.points
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = pts[idx]
    centered = nb - nb.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    normals = evecs[:, :, 0]
    scale = np.maximum(evals[:, 2], 1e-300)
    degenerate = evals[:, 1] <= 1e-10 * scale
    degenerate |= evals[:, 2] <= 1e-18
    vp = np.zeros(3) if viewpoint is None else np.asarray(viewpoint, dtype=np.float64)
    to_view = vp - pts
    flip = np.einsum("ni,ni->n", normals, to_view) < 0
    normals[flip] *= -1
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    normals[degenerate] = np.nan
    return PointCloud(pts.copy(), cloud.colors.copy(), normals)
