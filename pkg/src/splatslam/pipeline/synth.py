"""Seeded synthetic multi-agent RGB-D scenes. Frames are ray-cast against an
analytic textured room; a splat version of the same room is kept as reference."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from ..geometry import CameraIntrinsics, Pose, matrix_to_quat, quat_multiply
from ..splat import Gaussians, RGBDFrame, Submap, logit, save_submaps
from .dataset import Dataset, Trajectory, quantize_color, quantize_depth, write_dataset


@dataclass
class SynthParams:
    n_gaussians: int = 12000
    extent: float = 2.5  # room half-width, m
    room_height: float = 2.6
    n_objects: int = 8
    n_agents: int = 1
    trajectory: str = "circle"
    radius: float = 0.8
    cam_height: float = 1.3
    bob: float = 0.08  # vertical oscillation amplitude, m
    tilt_deg: float = 12.0
    # per-agent arc [start_deg, end_deg]; defaults to a closed loop for every agent
    arcs: list = field(default_factory=list)
    frames_per_agent: int = 200
    width: int = 80
    height: int = 60
    fx: float = 60.0
    fps: float = 30.0
    depth_noise: float = 0.0
    color_noise: float = 0.0
    # wall texture: a sum of random plane waves per color channel
    texture_waves: int = 8
    texture_min_wavelength: float = 0.25  # m
    texture_max_wavelength: float = 1.5
    texture_amplitude: float = 0.12

    @classmethod
    def from_file(cls, path) -> "SynthParams":
        data = yaml.safe_load(Path(path).read_text()) or {}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown synth parameters: {sorted(unknown)}")
        return cls(**data)

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fx, (self.width - 1) / 2, (self.height - 1) / 2, self.width, self.height)

    def agent_arcs(self) -> list[tuple[float, float]]:
        if self.arcs:
            if len(self.arcs) != self.n_agents:
                raise ValueError("need one arc per agent")
            return [tuple(a) for a in self.arcs]
        return [(0.0, 360.0)] * self.n_agents


@dataclass
class SynthScene:
    gaussians: Gaussians
    datasets: list[Dataset]
    params: SynthParams
    geometry: "RoomGeometry | None" = None


def _color_field(rng, n_waves, min_wavelength, max_wavelength, max_amp):
    k = rng.normal(size=(3, n_waves, 3))
    k /= np.linalg.norm(k, axis=2, keepdims=True)
    k *= rng.uniform(2 * np.pi / max_wavelength, 2 * np.pi / min_wavelength, size=(3, n_waves, 1))
    phase = rng.uniform(0, 2 * np.pi, size=(3, n_waves))
    amp = rng.uniform(0.3 * max_amp, max_amp, size=(3, n_waves))

    def f(x, base):
        base = np.broadcast_to(base, (len(x), 3))
        out = np.empty((len(x), 3))
        for c in range(3):
            out[:, c] = base[:, c] + np.sum(amp[c] * np.sin(x @ k[c].T + phase[c]), axis=1)
        return np.clip(out, 0.02, 0.98)

    return f


def _normal_quat(normal: np.ndarray) -> np.ndarray:
    """Quaternion rotating local +z onto ``normal``."""
    n = normal / np.linalg.norm(normal)
    a = np.array([1.0, 0, 0]) if abs(n[0]) < 0.9 else np.array([0, 1.0, 0])
    x = np.cross(a, n)
    x /= np.linalg.norm(x)
    y = np.cross(n, x)
    return matrix_to_quat(np.stack([x, y, n], axis=1))


def _plane(rng, origin, e1, e2, normal, spacing, color_fn, base):
    l1, l2 = np.linalg.norm(e1), np.linalg.norm(e2)
    n1, n2 = max(int(l1 / spacing), 2), max(int(l2 / spacing), 2)
    a, b = np.meshgrid((np.arange(n1) + 0.5) / n1, (np.arange(n2) + 0.5) / n2, indexing="ij")
    a = (a + rng.uniform(-0.25, 0.25, a.shape) / n1).ravel()
    b = (b + rng.uniform(-0.25, 0.25, b.shape) / n2).ravel()
    pts = origin + a[:, None] * e1 + b[:, None] * e2
    n = len(pts)
    q0 = _normal_quat(np.asarray(normal, dtype=np.float64))
    spin = rng.uniform(0, np.pi, n)
    qz = np.stack([np.cos(spin / 2), np.zeros(n), np.zeros(n), np.sin(spin / 2)], axis=1)
    rots = quat_multiply(np.broadcast_to(q0, (n, 4)), qz)
    s_t = spacing * rng.uniform(0.55, 0.8, (n, 2))
    scales = np.column_stack([s_t, np.full(n, spacing * 0.08)])
    return Gaussians(pts, scales, rots, np.full(n, logit(0.97)), color_fn(pts, base))


def _box(rng, center, size, spacing, color_fn, base):
    parts = []
    c, s = np.asarray(center), np.asarray(size)
    for axis in range(3):
        for sign in (-1.0, 1.0):
            normal = np.zeros(3)
            normal[axis] = sign
            u, v = [i for i in range(3) if i != axis]
            e1, e2 = np.zeros(3), np.zeros(3)
            e1[u], e2[v] = s[u], s[v]
            origin = c - 0.5 * s
            origin[axis] = c[axis] + sign * 0.5 * s[axis]
            parts.append(_plane(rng, origin, e1, e2, normal, spacing, color_fn, base))
    return Gaussians.concatenate(parts)


@dataclass
class RoomGeometry:
    """Analytic scene: an axis-aligned room with textured faces and solid boxes."""

    extent: float
    height: float
    face_bases: np.ndarray  # 6x3 base colors: floor, ceiling, -x, +x, -y, +y walls
    boxes: list  # (lo, hi, base color) per object
    color_fn: object = None

    def raycast(self, origin: np.ndarray, dirs: np.ndarray):
        """Ray parameter of the first hit and the hit surface's base color, per ray."""
        e = self.extent
        lo, hi = np.array([-e, -e, 0.0]), np.array([e, e, self.height])
        with np.errstate(divide="ignore", invalid="ignore"):
            t_hi = (hi - origin) / dirs
            t_lo = (lo - origin) / dirs
        exits = np.where(dirs > 0, t_hi, np.where(dirs < 0, t_lo, np.inf))
        axis = np.argmin(exits, axis=1)
        t = exits[np.arange(len(dirs)), axis]
        positive = dirs[np.arange(len(dirs)), axis] > 0
        face = np.choose(axis, [2, 4, 0]) + positive  # x -> 2/3, y -> 4/5, z -> 0/1
        base = self.face_bases[face]
        for blo, bhi, bbase in self.boxes:
            t_in, t_out = _slabs(origin, dirs, blo, bhi)
            hit = (t_in <= t_out) & (t_in > 0) & (t_in < t)
            t = np.where(hit, t_in, t)
            base = np.where(hit[:, None], bbase, base)
        return t, base

    def render(self, pose: Pose, intr: CameraIntrinsics, supersample: int = 2):
        """Exact z-depth at pixel centres and box-filtered surface color."""
        def rays(offsets):
            v, u = np.mgrid[0:intr.height, 0:intr.width].astype(np.float64)
            out = []
            for dv, du in offsets:
                r = np.stack([(u.ravel() + du - intr.cx) / intr.fx, (v.ravel() + dv - intr.cy) / intr.fy,
                              np.ones(u.size)], axis=1)
                out.append(r @ pose.R.T)  # unit camera-z, so the ray parameter is the depth
            return out

        (d0,) = rays([(0.0, 0.0)])
        depth, _ = self.raycast(pose.t, d0)
        k = supersample
        offs = [((i + 0.5) / k - 0.5, (j + 0.5) / k - 0.5) for i in range(k) for j in range(k)]
        color = np.zeros((d0.shape[0], 3))
        for d in rays(offs):
            t, base = self.raycast(pose.t, d)
            color += self.color_fn(pose.t + t[:, None] * d, base)
        color /= len(offs)
        return color.reshape(intr.height, intr.width, 3), depth.reshape(intr.height, intr.width)


def build_room(params: SynthParams, rng: np.random.Generator) -> tuple[Gaussians, RoomGeometry]:
    """Splat walls, floor, ceiling and boxes, plus the same scene in analytic form."""
    e, h = params.extent, params.room_height
    color_fn = _color_field(rng, params.texture_waves, params.texture_min_wavelength,
                            params.texture_max_wavelength, params.texture_amplitude)
    area = 4 * (2 * e) * h + 2 * (2 * e) ** 2
    spacing = np.sqrt(area / max(params.n_gaussians * 0.85, 1))
    surfaces = [
        # origin, e1, e2, inward normal
        ((-e, -e, 0), (2 * e, 0, 0), (0, 2 * e, 0), (0, 0, 1)),
        ((-e, -e, h), (2 * e, 0, 0), (0, 2 * e, 0), (0, 0, -1)),
        ((-e, -e, 0), (0, 2 * e, 0), (0, 0, h), (1, 0, 0)),
        ((e, -e, 0), (0, 2 * e, 0), (0, 0, h), (-1, 0, 0)),
        ((-e, -e, 0), (2 * e, 0, 0), (0, 0, h), (0, 1, 0)),
        ((-e, e, 0), (2 * e, 0, 0), (0, 0, h), (0, -1, 0)),
    ]
    parts, bases, boxes = [], [], []
    for o, e1, e2, n in surfaces:
        base = rng.uniform(0.25, 0.75, 3)
        bases.append(base)
        parts.append(_plane(rng, np.array(o, float), np.array(e1, float), np.array(e2, float), n, spacing, color_fn, base))
    for _ in range(params.n_objects):
        ang = rng.uniform(0, 2 * np.pi)
        r = rng.uniform(params.radius + 0.7, e - 0.35)
        size = rng.uniform(0.2, 0.6, 3)
        size[2] = rng.uniform(0.3, 1.4)
        center = np.array([r * np.cos(ang), r * np.sin(ang), 0.5 * size[2] + rng.uniform(0, 0.6)])
        base = rng.uniform(0.15, 0.85, 3)
        parts.append(_box(rng, center, size, spacing * 0.7, color_fn, base))
        boxes.append((center - 0.5 * size, center + 0.5 * size, base))
    return Gaussians.concatenate(parts), RoomGeometry(e, h, np.array(bases), boxes, color_fn)


def _slabs(o: np.ndarray, d: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Per-ray entry and exit parameters of an axis-aligned box."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - o) / d
        t2 = (hi - o) / d
    t1 = np.nan_to_num(t1, nan=-np.inf)
    t2 = np.nan_to_num(t2, nan=np.inf)
    return np.minimum(t1, t2).max(axis=1), np.maximum(t1, t2).min(axis=1)


def camera_pose(position: np.ndarray, forward: np.ndarray, tilt: float) -> Pose:
    """Camera-to-world pose with x right, y down, z along ``forward`` tilted down by ``tilt``."""
    up = np.array([0.0, 0.0, 1.0])
    f = forward / np.linalg.norm(forward)
    f = np.cos(tilt) * f - np.sin(tilt) * up
    right = np.cross(f, up)
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return Pose.from_rt(np.stack([right, down, f], axis=1), position)


def agent_trajectory(params: SynthParams, arc: tuple[float, float], n: int) -> list[Pose]:
    a0, a1 = np.deg2rad(arc[0]), np.deg2rad(arc[1])
    poses = []
    for i in range(n):
        s = i / max(n - 1, 1)
        th = a0 + (a1 - a0) * s
        if params.trajectory == "circle":
            pos = np.array([params.radius * np.cos(th), params.radius * np.sin(th),
                            params.cam_height + params.bob * np.sin(2 * th)])
            fwd = np.array([np.cos(th), np.sin(th), 0.0])
        elif params.trajectory == "line":
            # sweep along x, looking at the +y wall; arc values are x positions in decimeters
            pos = np.array([(arc[0] + (arc[1] - arc[0]) * s) / 10.0, -params.radius, params.cam_height])
            fwd = np.array([0.0, 1.0, 0.0])
        else:
            raise ValueError(f"unknown trajectory shape {params.trajectory!r}")
        poses.append(camera_pose(pos, fwd, np.deg2rad(params.tilt_deg)))
    return poses


def synth_scene(seed: int, params: SynthParams | None = None) -> SynthScene:
    """Build the room, render every agent's stream and quantize it as written to disk."""
    params = params or SynthParams()
    rng = np.random.default_rng(seed)
    room, geometry = build_room(params, rng)
    intr = params.intrinsics()
    datasets = []
    for a, arc in enumerate(params.agent_arcs()):
        poses = agent_trajectory(params, arc, params.frames_per_agent)
        ts = np.round(np.arange(len(poses)) / params.fps + 1.0 + 1000.0 * a, 6)
        frames = []
        for i, (t, p) in enumerate(zip(ts, poses)):
            color, depth = geometry.render(p, intr)
            if params.color_noise > 0:
                color = color + rng.normal(0, params.color_noise, color.shape)
            if params.depth_noise > 0:
                depth = np.where(depth > 0, depth + rng.normal(0, params.depth_noise, depth.shape), 0.0)
            color = quantize_color(color).astype(np.float64) / 255.0
            depth = quantize_depth(depth, intr.depth_scale).astype(np.float64) / intr.depth_scale
            frames.append(RGBDFrame(float(t), color, depth, i))
        datasets.append(Dataset(frames, intr, Trajectory(ts, poses), f"agent_{a}"))
    return SynthScene(room, datasets, params, geometry)


def write_synth(scene: SynthScene, out) -> list[Path]:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    dirs = []
    for ds in scene.datasets:
        d = out / ds.name
        write_dataset(d, ds)
        dirs.append(d)
    save_submaps(out / "gt_scene.bin", [Submap(-1, 0, scene.gaussians)])
    return dirs


def splat_frame(scene: SynthScene, pose: Pose, index: int = 0, timestamp: float = 0.0) -> RGBDFrame:
    """A frame rendered from the reference splat room instead of the analytic one.
    The map model can represent it exactly, which isolates optimizer convergence
    from representation capacity."""
    from ..renderer import render

    out = render(scene.gaussians, pose, scene.params.intrinsics())
    return RGBDFrame(float(timestamp), np.clip(out.color, 0.0, 1.0), out.depth.copy(), index)
