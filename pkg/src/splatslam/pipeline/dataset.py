"""RGB-D sequence ingestion (TUM-style layout) and trajectory files."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from ..geometry import CameraIntrinsics, Pose
from ..splat import RGBDFrame


class DatasetError(ValueError):
    pass


@dataclass
class Trajectory:
    timestamps: np.ndarray = field(default_factory=lambda: np.zeros(0))
    poses: list[Pose] = field(default_factory=list)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def positions(self) -> np.ndarray:
        return np.array([p.t for p in self.poses]).reshape(-1, 3)


def write_tum(path, traj: Trajectory) -> None:
    """One line per pose: ``timestamp tx ty tz qx qy qz qw``."""
    lines = []
    for ts, p in zip(traj.timestamps, traj.poses):
        w, x, y, z = p.q
        vals = [ts, *p.t, x, y, z, w]
        lines.append(" ".join(f"{v:.9f}" if i == 0 else f"{v:.9g}" for i, v in enumerate(vals)))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_tum(path) -> Trajectory:
    ts, poses = [], []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        v = [float(x) for x in line.replace(",", " ").split()]
        if len(v) != 8:
            raise DatasetError(f"{path}: expected 8 columns, got {len(v)}")
        ts.append(v[0])
        poses.append(Pose([v[7], v[4], v[5], v[6]], v[1:4]))
    try:
        return Trajectory(np.array(ts), poses)
    except ValueError as e:
        raise DatasetError(f"{path}: {e}") from None


@dataclass
class Dataset:
    frames: list[RGBDFrame]
    intrinsics: CameraIntrinsics
    groundtruth: Trajectory | None = None
    name: str = ""

    def __len__(self) -> int:
        return len(self.frames)


def write_intrinsics(path, intr: CameraIntrinsics) -> None:
    Path(path).write_text(
        "# fx fy cx cy width height depth_scale\n"
        f"{float(intr.fx)!r} {float(intr.fy)!r} {float(intr.cx)!r} {float(intr.cy)!r} {intr.width} {intr.height} {float(intr.depth_scale)!r}\n"
    )


def read_intrinsics(path) -> CameraIntrinsics:
    rows = [l for l in Path(path).read_text().splitlines() if l.strip() and not l.startswith("#")]
    if not rows:
        raise DatasetError(f"{path}: empty intrinsics file")
    v = rows[0].split()
    if len(v) not in (6, 7):
        raise DatasetError(f"{path}: expected 'fx fy cx cy width height [depth_scale]'")
    scale = float(v[6]) if len(v) == 7 else 5000.0
    return CameraIntrinsics(float(v[0]), float(v[1]), float(v[2]), float(v[3]), int(v[4]), int(v[5]), scale)


def quantize_color(color: np.ndarray) -> np.ndarray:
    return np.round(np.clip(color, 0.0, 1.0) * 255.0).astype(np.uint8)


def quantize_depth(depth: np.ndarray, depth_scale: float) -> np.ndarray:
    return np.clip(np.round(depth * depth_scale), 0, 65535).astype(np.uint16)


def write_dataset(root, ds: Dataset) -> None:
    """Write frames as 8-bit color / 16-bit depth PNGs plus the text side files."""
    root = Path(root)
    (root / "color").mkdir(parents=True, exist_ok=True)
    (root / "depth").mkdir(parents=True, exist_ok=True)
    write_intrinsics(root / "intrinsics.txt", ds.intrinsics)
    assoc = []
    for f in ds.frames:
        name = f"{f.timestamp:.6f}.png"
        Image.fromarray(quantize_color(f.color)).save(root / "color" / name)
        Image.fromarray(quantize_depth(f.depth, ds.intrinsics.depth_scale)).save(root / "depth" / name)
        assoc.append(f"{f.timestamp:.6f} color/{name} {f.timestamp:.6f} depth/{name}")
    (root / "associations.txt").write_text("\n".join(assoc) + ("\n" if assoc else ""))
    if ds.groundtruth is not None:
        write_tum(root / "groundtruth.txt", ds.groundtruth)


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root}: not a directory")
    for req in ("intrinsics.txt", "associations.txt"):
        if not (root / req).exists():
            raise DatasetError(f"{root}: missing {req}")
    intr = read_intrinsics(root / "intrinsics.txt")
    frames = []
    last_ts = -np.inf
    for i, line in enumerate(l for l in (root / "associations.txt").read_text().splitlines()
                             if l.strip() and not l.startswith("#")):
        parts = line.split()
        if len(parts) < 4:
            raise DatasetError(f"{root}/associations.txt: malformed line {line!r}")
        ts = float(parts[0])
        if ts <= last_ts:
            raise DatasetError(f"{root}: timestamps not strictly increasing at {ts}")
        last_ts = ts
        cpath, dpath = root / parts[1], root / parts[3]
        for p in (cpath, dpath):
            if not p.exists():
                raise DatasetError(f"missing image {p}")
        color = np.asarray(Image.open(cpath).convert("RGB"), dtype=np.float64) / 255.0
        raw = np.asarray(Image.open(dpath))
        if raw.dtype != np.uint16 and raw.dtype != np.int32:
            raise DatasetError(f"{dpath}: depth must be a 16-bit PNG")
        depth = raw.astype(np.float64) / intr.depth_scale
        if color.shape[:2] != (intr.height, intr.width) or depth.shape != (intr.height, intr.width):
            raise DatasetError(
                f"{cpath.name}: image size {color.shape[1]}x{color.shape[0]} does not match "
                f"intrinsics {intr.width}x{intr.height}"
            )
        frames.append(RGBDFrame(ts, color, depth, i))
    gt = read_tum(root / "groundtruth.txt") if (root / "groundtruth.txt").exists() else None
    return Dataset(frames, intr, gt, root.name)
