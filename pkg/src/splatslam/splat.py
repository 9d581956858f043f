"""Gaussian map atoms, keyframes, submaps and their binary container."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .geometry import (
    CameraIntrinsics,
    Pose,
    PointCloud,
    backproject,
    compose,
    inverse,
    quat_multiply,
    quat_to_matrix,
    valid_depth_mask,
)

if TYPE_CHECKING:
    from .mapping import MappingConfig


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


@dataclass(frozen=True)
class Gaussian:
    """A single splat. Covariance is ``R(rot) diag(scale**2) R(rot)^T``."""

    mean: np.ndarray
    scale: np.ndarray
    rot: np.ndarray
    opacity: float  # logit
    color: np.ndarray

    @property
    def covariance(self) -> np.ndarray:
        R = quat_to_matrix(self.rot)
        return R @ np.diag(np.asarray(self.scale) ** 2) @ R.T


@dataclass
class Gaussians:
    """Structure-of-arrays container for N splats."""

    means: np.ndarray
    scales: np.ndarray
    rots: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(-1, 3)
        self.rots = np.asarray(self.rots, dtype=np.float64).reshape(-1, 4)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(-1)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        if not all(len(a) == n for a in (self.scales, self.rots, self.opacities, self.colors)):
            raise ValueError("Gaussian parameter arrays have inconsistent lengths")

    @classmethod
    def empty(cls) -> "Gaussians":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)))

    @classmethod
    def from_list(cls, items: list[Gaussian]) -> "Gaussians":
        if not items:
            return cls.empty()
        return cls(
            np.array([g.mean for g in items]),
            np.array([g.scale for g in items]),
            np.array([g.rot for g in items]),
            np.array([g.opacity for g in items]),
            np.array([g.color for g in items]),
        )

    def __len__(self) -> int:
        return len(self.means)

    def __getitem__(self, i: int) -> Gaussian:
        return Gaussian(self.means[i].copy(), self.scales[i].copy(), self.rots[i].copy(),
                        float(self.opacities[i]), self.colors[i].copy())

    def copy(self) -> "Gaussians":
        return Gaussians(self.means.copy(), self.scales.copy(), self.rots.copy(),
                         self.opacities.copy(), self.colors.copy())

    def subset(self, idx) -> "Gaussians":
        return Gaussians(self.means[idx], self.scales[idx], self.rots[idx], self.opacities[idx], self.colors[idx])

    @staticmethod
    def concatenate(parts: list["Gaussians"]) -> "Gaussians":
        parts = [p for p in parts if len(p)]
        if not parts:
            return Gaussians.empty()
        return Gaussians(
            np.concatenate([p.means for p in parts]),
            np.concatenate([p.scales for p in parts]),
            np.concatenate([p.rots for p in parts]),
            np.concatenate([p.opacities for p in parts]),
            np.concatenate([p.colors for p in parts]),
        )

    @property
    def alphas(self) -> np.ndarray:
        return sigmoid(self.opacities)

    def rotations(self) -> np.ndarray:
        return quat_to_matrix(self.rots)

    def covariances(self) -> np.ndarray:
        R = self.rotations()
        return np.einsum("nij,nj,nkj->nik", R, self.scales**2, R)

    def transformed(self, T: Pose) -> "Gaussians":
        R = T.R
        return Gaussians(
            self.means @ R.T + T.t,
            self.scales.copy(),
            quat_multiply(T.q, self.rots),
            self.opacities.copy(),
            self.colors.copy(),
        )

    def check_finite(self) -> None:
        bad = ~(
            np.isfinite(self.means).all(1)
            & np.isfinite(self.scales).all(1)
            & np.isfinite(self.rots).all(1)
            & np.isfinite(self.opacities)
            & np.isfinite(self.colors).all(1)
        )
        if bad.any():
            raise ValueError(f"non-finite parameters in Gaussian {int(np.flatnonzero(bad)[0])}")


@dataclass
class RGBDFrame:
    timestamp: float
    color: np.ndarray  # HxWx3 in [0, 1]
    depth: np.ndarray  # HxW meters, 0 = invalid
    index: int = 0


@dataclass
class Keyframe:
    frame_index: int
    pose: Pose  # in the owning submap's local frame
    color: np.ndarray
    depth: np.ndarray
    timestamp: float = 0.0
    descriptor: np.ndarray | None = None

    @classmethod
    def from_frame(cls, frame: RGBDFrame, pose: Pose) -> "Keyframe":
        return cls(frame.index, pose, frame.color, frame.depth, frame.timestamp)

    def frame(self) -> RGBDFrame:
        return RGBDFrame(self.timestamp, self.color, self.depth, self.frame_index)


@dataclass
class Submap:
    agent_id: int
    index: int
    gaussians: Gaussians = field(default_factory=Gaussians.empty)
    keyframes: list[Keyframe] = field(default_factory=list)
    anchor: Pose = field(default_factory=Pose.identity)

    @property
    def id(self) -> tuple[int, int]:
        return (self.agent_id, self.index)

    def copy(self) -> "Submap":
        return Submap(self.agent_id, self.index, self.gaussians.copy(),
                      [replace(k) for k in self.keyframes], self.anchor)

    def global_gaussians(self) -> Gaussians:
        return self.gaussians.transformed(self.anchor)

    def point_cloud(self, intr: CameraIntrinsics, voxel: float = 0.0, max_depth: float = 20.0) -> PointCloud:
        """Union of keyframe backprojections in the local frame, optionally voxelized."""
        from .geometry import voxel_downsample

        clouds = [backproject(k.depth, intr, k.pose, k.color, max_depth) for k in self.keyframes]
        cloud = PointCloud.concatenate(clouds)
        return voxel_downsample(cloud, voxel) if voxel > 0 else cloud


def transform_submap(submap: Submap, T: Pose) -> Submap:
    """Rigidly move all submap content by ``T``.

    Means and splat orientations are rotated and translated, keyframe poses
    are left-composed with ``T``; scales, opacities and colors are untouched.
    The anchor is compensated so the global placement stays the same.
    """
    keyframes = [replace(k, pose=compose(T, k.pose)) for k in submap.keyframes]
    return Submap(
        submap.agent_id,
        submap.index,
        submap.gaussians.transformed(T),
        keyframes,
        compose(submap.anchor, inverse(T)),
    )


def seed_gaussians(kf: Keyframe, alpha_map: np.ndarray, intr: CameraIntrinsics, cfg: "MappingConfig") -> Gaussians:
    """New splats on a stride grid wherever depth is valid and coverage is low."""
    if alpha_map.shape != kf.depth.shape:
        raise ValueError("alpha map and keyframe resolution differ")
    grid = np.zeros(kf.depth.shape, dtype=bool)
    grid[:: cfg.seed_stride, :: cfg.seed_stride] = True
    mask = grid & (alpha_map < cfg.alpha_min) & valid_depth_mask(kf.depth, cfg.max_depth)
    cloud = backproject(kf.depth, intr, kf.pose, kf.color, cfg.max_depth, mask=mask)
    n = len(cloud)
    if n == 0:
        return Gaussians.empty()
    v, u = np.nonzero(mask)
    z = kf.depth[v, u]
    scale = cfg.scale_gain * z / intr.fx
    return Gaussians(
        cloud.points,
        np.repeat(scale[:, None], 3, axis=1),
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.zeros(n),  # logit(0.5)
        np.clip(cloud.colors, 0.0, 1.0),
    )


# --------------------------------------------------------------------------
# binary container
# --------------------------------------------------------------------------

MAGIC = b"SPLATMAP"
VERSION = 1
_HEADER = struct.Struct("<8sII")
_SUBMAP = struct.Struct("<iiII7d")
_KEYFRAME = struct.Struct("<id7dIIB")


def _write_array(buf: list, arr: np.ndarray, dtype: str) -> None:
    buf.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def save_submaps(path, submaps: list[Submap]) -> None:
    """Write submaps: f32 splat parameters, f64 poses and timestamps, f32 keyframe images."""
    buf = [_HEADER.pack(MAGIC, VERSION, len(submaps))]
    for s in submaps:
        g = s.gaussians
        buf.append(_SUBMAP.pack(s.agent_id, s.index, len(g), len(s.keyframes), *s.anchor.q, *s.anchor.t))
        for arr in (g.means, g.scales, g.rots, g.opacities, g.colors):
            _write_array(buf, arr, "<f4")
        for k in s.keyframes:
            h, w = k.depth.shape
            has_desc = k.descriptor is not None
            buf.append(_KEYFRAME.pack(k.frame_index, k.timestamp, *k.pose.q, *k.pose.t, h, w, has_desc))
            _write_array(buf, k.color, "<f4")
            _write_array(buf, k.depth, "<f4")
            if has_desc:
                buf.append(struct.pack("<I", len(k.descriptor)))
                _write_array(buf, k.descriptor, "<f4")
    Path(path).write_bytes(b"".join(buf))


def load_submaps(path) -> list[Submap]:
    data = memoryview(Path(path).read_bytes())
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ValueError(f"{path}: not a submap container")
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = _HEADER.size

    def take(n, shape):
        nonlocal off
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float64).reshape(shape)
        off += 4 * n
        return arr

    out = []
    for _ in range(count):
        agent, index, n, nk, *anc = _SUBMAP.unpack_from(data, off)
        off += _SUBMAP.size
        g = Gaussians(take(3 * n, (n, 3)), take(3 * n, (n, 3)), take(4 * n, (n, 4)), take(n, (n,)), take(3 * n, (n, 3)))
        kfs = []
        for _ in range(nk):
            fi, ts, *rest = _KEYFRAME.unpack_from(data, off)
            off += _KEYFRAME.size
            pose_vals, h, w, has_desc = rest[:7], rest[7], rest[8], rest[9]
            color = take(h * w * 3, (h, w, 3))
            depth = take(h * w, (h, w))
            desc = None
            if has_desc:
                (m,) = struct.unpack_from("<I", data, off)
                off += 4
                desc = take(m, (m,))
            kfs.append(Keyframe(fi, Pose(pose_vals[:4], pose_vals[4:]), color, depth, ts, desc))
        out.append(Submap(agent, index, g, kfs, Pose(anc[:4], anc[4:])))
    return out
