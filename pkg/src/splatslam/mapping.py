"""Submap lifecycle: creation thresholds, keyframe integration and masked
color+depth optimization of the active submap."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .geometry import CameraIntrinsics, Pose, rotation_angle, valid_depth_mask
from .renderer import RenderOutput, render, render_backward
from .splat import Gaussians, Keyframe, Submap, seed_gaussians


@dataclass
class MappingConfig:
    d_max: float = 0.5
    theta_max: float = np.deg2rad(30.0)
    alpha_min: float = 0.6
    lambda_c: float = 0.5
    iters_per_keyframe: int = 60
    # per-block step sizes; for "gd" they multiply the gradient of the per-pixel
    # mean loss, for "adam" they are the Adam step sizes
    lr_mean: float = 1e-3
    lr_scale: float = 5e-3
    lr_rot: float = 2e-3
    lr_opacity: float = 1.5e-1
    lr_color: float = 1e-2
    optimizer: str = "adam"
    seed_stride: int = 4
    scale_gain: float = 3.0
    inlier_factor: float = 10.0
    alpha_mask_power: int = 3
    max_depth: float = 20.0
    keyframe_every: int = 5

    def __post_init__(self):
        if not (self.d_max > 0 and self.theta_max > 0):
            raise ValueError("d_max and theta_max must be positive")
        if not 0.0 <= self.lambda_c <= 1.0:
            raise ValueError("lambda_c must lie in [0, 1]")
        if self.iters_per_keyframe < 1:
            raise ValueError("iters_per_keyframe must be >= 1")
        if self.optimizer not in ("gd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class MaskedLoss:
    value: float
    m_alpha: np.ndarray
    m_in: np.ndarray
    color_residual: np.ndarray  # rendered - observed, HxWx3
    depth_residual: np.ndarray  # rendered - observed, 0 where depth invalid
    depth_valid: np.ndarray

    def gradients(self, lambda_c: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """dL/d(color, depth, alpha) with both masks held constant."""
        m = self.m_in * self.m_alpha
        g_color = lambda_c * m[..., None] * np.sign(self.color_residual)
        g_depth = (1.0 - lambda_c) * m * self.depth_valid * np.sign(self.depth_residual)
        return g_color, g_depth, np.zeros_like(m)


def should_start_submap(current: Pose, cfg: MappingConfig) -> bool:
    return bool(np.linalg.norm(current.t) > cfg.d_max or rotation_angle(current) > cfg.theta_max)


def mapping_loss(out: RenderOutput, kf: Keyframe, cfg: MappingConfig) -> MaskedLoss:
    if out.depth.shape != kf.depth.shape:
        raise ValueError("render and keyframe resolution differ")
    valid = valid_depth_mask(kf.depth, cfg.max_depth)
    dc = out.color - kf.color
    dd = np.where(valid, out.depth - kf.depth, 0.0)
    ec = np.abs(dc).sum(axis=2)
    ed = np.abs(dd)
    if valid.any():
        med_c = np.median(ec[valid])
        med_d = np.median(ed[valid])
    else:
        med_c = np.median(ec)
        med_d = 0.0
    k = cfg.inlier_factor
    m_in = (ec <= k * med_c) & (~valid | (ed <= k * med_d))
    m_in = m_in.astype(np.float64)
    m_alpha = np.clip(out.alpha, 0.0, 1.0) ** cfg.alpha_mask_power
    per_pixel = cfg.lambda_c * ec + (1.0 - cfg.lambda_c) * ed
    value = float(np.sum(m_in * m_alpha * per_pixel))
    return MaskedLoss(value, m_alpha, m_in, dc, dd, valid.astype(np.float64))


class _Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, name: str, grad: np.ndarray) -> np.ndarray:
        m = self.m.get(name, np.zeros_like(grad))
        v = self.v.get(name, np.zeros_like(grad))
        m = self.b1 * m + (1 - self.b1) * grad
        v = self.b2 * v + (1 - self.b2) * grad * grad
        self.m[name], self.v[name] = m, v
        mh = m / (1 - self.b1**self.t)
        vh = v / (1 - self.b2**self.t)
        return mh / (np.sqrt(vh) + self.eps)


def _apply_step(g: Gaussians, grads, cfg: MappingConfig, adam: _Adam | None) -> None:
    blocks = {
        "mean": grads.d_mean,
        "scale": grads.d_scale * g.scales,  # log-scale parameterization
        "rot": grads.d_rot,
        "opacity": grads.d_opacity,
        "color": grads.d_color,
    }
    lrs = {"mean": cfg.lr_mean, "scale": cfg.lr_scale, "rot": cfg.lr_rot,
           "opacity": cfg.lr_opacity, "color": cfg.lr_color}
    for name, grad in blocks.items():
        lr = lrs[name]
        if lr == 0.0:
            continue
        if adam is not None:
            step = lr * adam.step(name, grad)
        else:
            step = lr * grad
        if name == "mean":
            g.means -= step
        elif name == "scale":
            g.scales *= np.exp(-step)
            np.maximum(g.scales, 1e-4, out=g.scales)
        elif name == "rot":
            g.rots -= step
            g.rots /= np.linalg.norm(g.rots, axis=1, keepdims=True)
        elif name == "opacity":
            g.opacities -= step
            np.clip(g.opacities, -12.0, 12.0, out=g.opacities)
        else:
            g.colors -= step
            np.clip(g.colors, 0.0, 1.0, out=g.colors)


def optimize_submap(submap: Submap, intr: CameraIntrinsics, cfg: MappingConfig, iters: int | None = None) -> Submap:
    """Fixed-iteration descent on the masked loss, cycling through keyframes (newest first).

    Keyframe poses are frozen. Gradients are taken of the per-pixel mean loss.
    """
    if not submap.keyframes:
        raise ValueError("submap has no keyframes to optimize against")
    out = submap.copy()
    g = out.gaussians
    if len(g) == 0:
        return out
    n_iter = cfg.iters_per_keyframe if iters is None else iters
    adam = _Adam() if cfg.optimizer == "adam" else None
    kfs = out.keyframes
    npix = intr.width * intr.height
    for it in range(n_iter):
        kf = kfs[(len(kfs) - 1 - it) % len(kfs)]
        fwd = render(g, kf.pose, intr)
        loss = mapping_loss(fwd, kf, cfg)
        gc, gd, ga = loss.gradients(cfg.lambda_c)
        grads = render_backward(g, kf.pose, intr, gc / npix, gd / npix, ga, forward=fwd)
        if adam is not None:
            adam.t += 1
        _apply_step(g, grads, cfg, adam)
    return out


def submap_loss(submap: Submap, intr: CameraIntrinsics, cfg: MappingConfig) -> float:
    """Sum of the masked loss over all keyframes of the submap."""
    return sum(mapping_loss(render(submap.gaussians, k.pose, intr), k, cfg).value for k in submap.keyframes)


def integrate_keyframe(submap: Submap, kf: Keyframe, intr: CameraIntrinsics, cfg: MappingConfig) -> Submap:
    """Seed splats where the current map is thin, add the keyframe, then optimize."""
    alpha = render(submap.gaussians, kf.pose, intr).alpha
    new = seed_gaussians(kf, alpha, intr, cfg)
    grown = replace(
        submap,
        gaussians=Gaussians.concatenate([submap.gaussians, new]),
        keyframes=list(submap.keyframes) + [kf],
    )
    return optimize_submap(grown, intr, cfg)
