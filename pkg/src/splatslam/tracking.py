"""Camera tracking in two stages: dense hybrid odometry between consecutive
frames for a coarse relative pose, then render-and-compare refinement of the
pose against the frozen active submap."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .geometry import CameraIntrinsics, Pose, compose, se3_exp, valid_depth_mask
from .mapping import MappingConfig, mapping_loss
from .renderer import render, render_backward
from .splat import Keyframe, RGBDFrame, Submap

MIN_CORRESPONDENCES = 50


class InsufficientOverlap(RuntimeError):
    pass


class TrackingLost(RuntimeError):
    pass


@dataclass
class TrackingConfig:
    pyramid_levels: int = 3
    gn_iters_per_level: int = 10
    refine_iters: int = 40
    refine_lr_rot: float = 2e-3
    refine_lr_trans: float = 2e-3
    convergence_tol: float = 1e-5
    sigma: float = 0.3  # depth weight in the hybrid odometry objective
    max_depth_diff: float = 0.07  # correspondence gate on the depth residual, m
    max_depth: float = 20.0
    refine_every_frame: bool = True
    loss: MappingConfig = field(default_factory=MappingConfig)

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if self.gn_iters_per_level < 1 or self.refine_iters < 1:
            raise ValueError("iteration counts must be >= 1")
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError("sigma must lie in [0, 1]")


# --------------------------------------------------------------------------
# coarse stage: hybrid photometric + geometric Gauss-Newton
# --------------------------------------------------------------------------


def _intensity(color: np.ndarray) -> np.ndarray:
    return color @ np.array([0.299, 0.587, 0.114])


def _downsample(img: np.ndarray, valid: np.ndarray | None = None):
    H, W = img.shape[0] // 2 * 2, img.shape[1] // 2 * 2
    if valid is None:
        blk = img[:H, :W].reshape(H // 2, 2, W // 2, 2)
        return blk.mean(axis=(1, 3))
    v = valid[:H, :W].reshape(H // 2, 2, W // 2, 2)
    d = np.where(valid, img, 0.0)[:H, :W].reshape(H // 2, 2, W // 2, 2)
    n = v.sum(axis=(1, 3))
    out = np.where(n > 0, d.sum(axis=(1, 3)) / np.maximum(n, 1), 0.0)
    return out


def _pyramid(frame: RGBDFrame, intr: CameraIntrinsics, levels: int, max_depth: float):
    gray = _intensity(frame.color)
    depth = np.where(valid_depth_mask(frame.depth, max_depth), frame.depth, 0.0)
    out = [(gray, depth, intr)]
    for lvl in range(1, levels):
        g, d, _ = out[-1]
        out.append((_downsample(g), _downsample(d, d > 0), intr.scaled(2**lvl)))
    return out


def _depth_gradients(depth: np.ndarray):
    """Central differences, zeroed where a neighbour is missing."""
    gx = np.zeros_like(depth)
    gy = np.zeros_like(depth)
    ok_x = (depth[:, 2:] > 0) & (depth[:, :-2] > 0)
    ok_y = (depth[2:, :] > 0) & (depth[:-2, :] > 0)
    gx[:, 1:-1] = np.where(ok_x, 0.5 * (depth[:, 2:] - depth[:, :-2]), 0.0)
    gy[1:-1, :] = np.where(ok_y, 0.5 * (depth[2:, :] - depth[:-2, :]), 0.0)
    return gx, gy


def _smooth_depth(depth: np.ndarray, rel_curv: float = 0.02) -> np.ndarray:
    """Valid pixels away from depth discontinuities.

    Depth along a plane has small second differences at any resolution, while
    an occlusion edge produces a jump; neighbours must also carry depth.
    """
    ok = depth > 0
    out = ok.copy()
    pad = np.pad(depth, 1)
    H, W = depth.shape
    for (a, b), (c, d) in (((1, 0), (1, 2)), ((0, 1), (2, 1))):
        n1 = pad[a:a + H, b:b + W]
        n2 = pad[c:c + H, d:d + W]
        out &= (n1 > 0) & (n2 > 0) & (np.abs(n1 + n2 - 2.0 * depth) <= rel_curv * depth)
    return out


def _sample(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    return map_coordinates(img, [v, u], order=1, mode="nearest")


def _correspondences(src_gray, src_depth, tgt, T: Pose, intr: CameraIntrinsics, max_diff: float):
    """Warp valid source pixels into the target image under ``T`` (source -> target)."""
    tgt_gray, tgt_depth, tgt_gx, tgt_gy, tgt_dx, tgt_dy = tgt
    H, W = src_depth.shape
    vs, us = np.nonzero(_smooth_depth(src_depth))
    z = src_depth[vs, us]
    p = np.stack([(us - intr.cx) / intr.fx * z, (vs - intr.cy) / intr.fy * z, z], axis=1)
    q = p @ T.R.T + T.t
    zq = q[:, 2]
    ok = zq > 1e-6
    zs = np.where(ok, zq, 1.0)
    u = intr.fx * q[:, 0] / zs + intr.cx
    v = intr.fy * q[:, 1] / zs + intr.cy
    ok &= (u >= 0) & (u <= W - 1) & (v >= 0) & (v <= H - 1)
    # all four bilinear neighbours must carry depth
    u0 = np.clip(np.floor(u).astype(np.int64), 0, W - 1)
    v0 = np.clip(np.floor(v).astype(np.int64), 0, H - 1)
    u1 = np.minimum(u0 + 1, W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    ok &= (tgt_depth[v0, u0] > 0) & (tgt_depth[v0, u1] > 0) & (tgt_depth[v1, u0] > 0) & (tgt_depth[v1, u1] > 0)
    idx = np.flatnonzero(ok)
    u, v, q = u[idx], v[idx], q[idx]
    d_t = _sample(tgt_depth, u, v)
    r_d = d_t - q[:, 2]
    keep = np.abs(r_d) < max_diff
    idx, u, v, q, r_d = idx[keep], u[keep], v[keep], q[keep], r_d[keep]
    r_i = _sample(tgt_gray, u, v) - src_gray[vs[idx], us[idx]]
    grads = [_sample(g, u, v) for g in (tgt_gx, tgt_gy, tgt_dx, tgt_dy)]
    return q, r_i, r_d, grads


def _gn_step(q, r_i, r_d, grads, intr: CameraIntrinsics, sigma: float) -> np.ndarray:
    """Solve for a left increment exp(delta) applied to the current source->target pose."""
    gx, gy, dx, dy = grads
    x, y, z = q[:, 0], q[:, 1], q[:, 2]
    n = len(z)
    # d(u,v)/dq
    Jp = np.zeros((n, 2, 3))
    Jp[:, 0, 0] = intr.fx / z
    Jp[:, 0, 2] = -intr.fx * x / z**2
    Jp[:, 1, 1] = intr.fy / z
    Jp[:, 1, 2] = -intr.fy * y / z**2
    # dq/ddelta for q -> exp(delta) q: [I, -[q]x]
    Jq = np.zeros((n, 3, 6))
    Jq[:, :, :3] = np.eye(3)
    Jq[:, 0, 4], Jq[:, 0, 5] = z, -y
    Jq[:, 1, 3], Jq[:, 1, 5] = -z, x
    Jq[:, 2, 3], Jq[:, 2, 4] = y, -x
    Juv = Jp @ Jq  # n x 2 x 6
    J_i = gx[:, None] * Juv[:, 0] + gy[:, None] * Juv[:, 1]
    J_d = dx[:, None] * Juv[:, 0] + dy[:, None] * Juv[:, 1] - Jq[:, 2]
    w_i, w_d = 1.0 - sigma, sigma
    Hm = w_i * J_i.T @ J_i + w_d * J_d.T @ J_d
    b = w_i * J_i.T @ r_i + w_d * J_d.T @ r_d
    Hm += 1e-9 * np.trace(Hm) / 6.0 * np.eye(6)
    return -np.linalg.solve(Hm, b)


def _cost(corr, sigma: float) -> float:
    _, r_i, r_d, _ = corr
    if len(r_i) == 0:
        return np.inf
    return float(np.mean((1.0 - sigma) * r_i**2 + sigma * r_d**2))


def coarse_odometry(prev: RGBDFrame, curr: RGBDFrame, intr: CameraIntrinsics, cfg: TrackingConfig,
                    init: Pose | None = None) -> Pose:
    """Relative pose T_{prev,curr} (maps ``curr`` camera coordinates into ``prev``'s).

    Each pyramid level minimizes (1-sigma) r_I^2 + sigma r_D^2 over valid warped
    pixels of ``curr``, coarse to fine.
    """
    if prev.depth.shape != curr.depth.shape or prev.color.shape != curr.color.shape:
        raise ValueError("frames differ in resolution")
    src = _pyramid(curr, intr, cfg.pyramid_levels, cfg.max_depth)
    tgt = _pyramid(prev, intr, cfg.pyramid_levels, cfg.max_depth)
    T = init if init is not None else Pose.identity()
    for lvl in reversed(range(cfg.pyramid_levels)):
        s_gray, s_depth, K = src[lvl]
        t_gray, t_depth, _ = tgt[lvl]
        gy, gx = np.gradient(t_gray)
        dx, dy = _depth_gradients(t_depth)
        tgt_pack = (t_gray, t_depth, gx, gy, dx, dy)
        max_diff = cfg.max_depth_diff * (2**lvl)
        cur = _correspondences(s_gray, s_depth, tgt_pack, T, K, max_diff)
        cost = _cost(cur, cfg.sigma)
        for _ in range(cfg.gn_iters_per_level):
            if len(cur[1]) < MIN_CORRESPONDENCES:
                break
            delta = _gn_step(*cur, K, cfg.sigma)
            T_new = compose(se3_exp(delta), T)
            nxt = _correspondences(s_gray, s_depth, tgt_pack, T_new, K, max_diff)
            new_cost = _cost(nxt, cfg.sigma)
            # a step that raises the cost or sheds half the overlap is rejected
            if len(nxt[1]) < len(cur[1]) // 2 or new_cost > cost:
                break
            T, cur, cost = T_new, nxt, new_cost
            if np.linalg.norm(delta) < cfg.convergence_tol:
                break
    s_gray, s_depth, K = src[0]
    t_gray, t_depth, _ = tgt[0]
    gy, gx = np.gradient(t_gray)
    dx, dy = _depth_gradients(t_depth)
    q, *_ = _correspondences(s_gray, s_depth, (t_gray, t_depth, gx, gy, dx, dy), T, K, cfg.max_depth_diff)
    if len(q) < MIN_CORRESPONDENCES:
        raise InsufficientOverlap(f"insufficient overlap: {len(q)} valid correspondences")
    return T


# --------------------------------------------------------------------------
# fine stage: frame-to-model refinement in the local camera frame
# --------------------------------------------------------------------------


def tracking_loss(submap: Submap, frame: RGBDFrame, pose: Pose, intr: CameraIntrinsics, cfg: TrackingConfig):
    kf = Keyframe.from_frame(frame, pose)
    out = render(submap.gaussians, pose, intr)
    return out, mapping_loss(out, kf, cfg.loss)


def refine_pose(frame: RGBDFrame, submap: Submap, T_init: Pose, intr: CameraIntrinsics, cfg: TrackingConfig) -> Pose:
    """Descend on a local increment delta (pose = T exp(delta)) with the splats frozen.

    Rotation and translation parts take separate step sizes. Returns the pose
    with the lowest loss seen, so the result is never worse than ``T_init``.
    """
    pose = T_init
    best_pose, best_loss = T_init, np.inf
    npix = intr.width * intr.height
    lc = cfg.loss.lambda_c
    m1, m2 = np.zeros(6), np.zeros(6)
    lr = np.array([cfg.refine_lr_trans] * 3 + [cfg.refine_lr_rot] * 3)
    b1, b2 = 0.9, 0.999
    for it in range(cfg.refine_iters):
        out, loss = tracking_loss(submap, frame, pose, intr, cfg)
        if it == 0 and not np.any(out.alpha > 0):
            raise TrackingLost(f"tracking lost at frame {frame.index}: map not visible")
        if loss.value < best_loss:
            best_loss, best_pose = loss.value, pose
        gc, gd, ga = loss.gradients(lc)
        g = render_backward(submap.gaussians, pose, intr, gc / npix, gd / npix, ga, forward=out).d_pose
        m1 = b1 * m1 + (1 - b1) * g
        m2 = b2 * m2 + (1 - b2) * g * g
        step = lr * (m1 / (1 - b1 ** (it + 1))) / (np.sqrt(m2 / (1 - b2 ** (it + 1))) + 1e-12)
        delta = -step
        pose = compose(pose, se3_exp(delta))
        if np.linalg.norm(delta) < cfg.convergence_tol:
            break
    _, loss = tracking_loss(submap, frame, pose, intr, cfg)
    if loss.value < best_loss:
        best_pose = pose
    return best_pose


def track_frame(prev_kf_pose: Pose, prev: RGBDFrame, curr: RGBDFrame, submap: Submap, intr: CameraIntrinsics,
                cfg: TrackingConfig, velocity: Pose | None = None) -> Pose:
    """T_i = T_{i-1} T_{i-1,i}, then refinement against the submap.

    ``prev_kf_pose`` is the previous frame's pose in the submap frame. When the
    coarse stage fails, the constant-velocity prediction ``velocity`` (last
    relative motion) seeds refinement instead.
    """
    try:
        rel = coarse_odometry(prev, curr, intr, cfg)
    except InsufficientOverlap:
        rel = velocity if velocity is not None else Pose.identity()
    T = compose(prev_kf_pose, rel)
    if not cfg.refine_every_frame or len(submap.gaussians) == 0:
        return T
    return refine_pose(curr, submap, T, intr, cfg)


def write_pose_log(path, timestamps, poses: list[Pose]) -> None:
    from .pipeline.dataset import Trajectory, write_tum

    write_tum(Path(path), Trajectory(np.asarray(timestamps), list(poses)))
