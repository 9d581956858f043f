"""Differentiable CPU rasterizer for Gaussian splats.

Forward: camera-frame transform, perspective projection, EWA 2D covariance
with a 0.3 px^2 low-pass, front-to-back alpha compositing of color, expected
depth and coverage. Backward: exact derivatives of that forward pass w.r.t.
every splat parameter and a right-multiplied se(3) camera increment.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _raster
from .geometry import CameraIntrinsics, Pose, quat_to_matrix
from .splat import Gaussians, sigmoid

BLUR = 0.3
NEAR = 0.1
EXTENT_SIGMA = 3.0
FRUSTUM_MARGIN = 1.3  # splat centers may lie this far outside the view cone (relative)


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    alpha: np.ndarray


@dataclass
class RenderGradients:
    d_mean: np.ndarray
    d_scale: np.ndarray
    d_rot: np.ndarray
    d_opacity: np.ndarray  # w.r.t. the opacity logit
    d_color: np.ndarray
    d_pose: np.ndarray  # (rho, phi) of T * exp(delta)


@dataclass
class _Projected:
    visible: np.ndarray
    order: np.ndarray
    p_cam: np.ndarray
    cov_cam: np.ndarray
    J: np.ndarray
    cov2d: np.ndarray
    u: np.ndarray
    v: np.ndarray
    conic: np.ndarray
    opac: np.ndarray
    box: np.ndarray


def _project(g: Gaussians, pose: Pose, intr: CameraIntrinsics) -> _Projected:
    Rcw = pose.R.T
    p = (g.means - pose.t) @ Rcw.T
    M = quat_to_matrix(g.rots) * g.scales[:, None, :]
    cov_w = M @ np.transpose(M, (0, 2, 1))
    cov_c = Rcw @ cov_w @ Rcw.T
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    zs = np.where(z > NEAR, z, 1.0)
    n = len(g)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = intr.fx / zs
    J[:, 0, 2] = -intr.fx * x / zs**2
    J[:, 1, 1] = intr.fy / zs
    J[:, 1, 2] = -intr.fy * y / zs**2
    cov2d = J @ cov_c @ np.transpose(J, (0, 2, 1))
    cov2d[:, 0, 0] += BLUR
    cov2d[:, 1, 1] += BLUR
    s00, s01, s11 = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = s00 * s11 - s01 * s01
    conic = np.stack([s11 / det, -s01 / det, s00 / det], axis=1)
    u = intr.fx * x / zs + intr.cx
    v = intr.fy * y / zs + intr.cy
    mid = 0.5 * (s00 + s11)
    lam = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    r = EXTENT_SIGMA * np.sqrt(lam)
    with np.errstate(invalid="ignore"):
        box = np.stack(
            [
                np.clip(np.ceil(u - r), 0, intr.width),
                np.clip(np.floor(u + r), -1, intr.width - 1),
                np.clip(np.ceil(v - r), 0, intr.height),
                np.clip(np.floor(v + r), -1, intr.height - 1),
            ],
            axis=1,
        )
    lim_x = FRUSTUM_MARGIN * 0.5 * intr.width / intr.fx
    lim_y = FRUSTUM_MARGIN * 0.5 * intr.height / intr.fy
    in_cone = (np.abs((u - intr.cx) / intr.fx) <= lim_x) & (np.abs((v - intr.cy) / intr.fy) <= lim_y)
    visible = (z > NEAR) & in_cone & (box[:, 0] <= box[:, 1]) & (box[:, 2] <= box[:, 3])
    box = np.where(visible[:, None], box, 0).astype(np.int64)
    idx = np.flatnonzero(visible)
    order = idx[np.lexsort((idx, z[idx]))]
    return _Projected(visible, order, p, cov_c, J, cov2d, u, v, conic, sigmoid(g.opacities), box)


def render(gaussians: Gaussians, camera_pose: Pose, intr: CameraIntrinsics) -> RenderOutput:
    """Render color, expected depth and accumulated alpha seen from ``camera_pose`` (camera-to-world)."""
    gaussians.check_finite()
    H, W = intr.height, intr.width
    if len(gaussians) == 0:
        return RenderOutput(np.zeros((H, W, 3)), np.zeros((H, W)), np.zeros((H, W)))
    pr = _project(gaussians, camera_pose, intr)
    color, depth, alpha = _raster.composite_forward(
        pr.order, pr.u, pr.v, pr.conic, pr.opac, gaussians.colors, pr.p_cam[:, 2], pr.box, H, W
    )
    return RenderOutput(color, depth, alpha)


def _quat_backward(q: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. an unnormalized quaternion given dL/dR (N,3,3)."""
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = (q / norm).T
    g = np.empty_like(q)
    g[:, 0] = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    g[:, 1] = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1] - w * G[:, 1, 2]
                   + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    g[:, 2] = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0] + z * G[:, 1, 2]
                   - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    g[:, 3] = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0] - 2 * z * G[:, 1, 1]
                   + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    n = q / norm
    return (g - np.sum(g * n, axis=1, keepdims=True) * n) / norm


def render_backward(
    gaussians: Gaussians,
    camera_pose: Pose,
    intr: CameraIntrinsics,
    grad_color: np.ndarray,
    grad_depth: np.ndarray,
    grad_alpha: np.ndarray,
    forward: RenderOutput | None = None,
) -> RenderGradients:
    """Back-propagate per-pixel loss gradients to splat parameters and the camera increment."""
    H, W = intr.height, intr.width
    if grad_color.shape != (H, W, 3) or grad_depth.shape != (H, W) or grad_alpha.shape != (H, W):
        raise ValueError("loss gradient images do not match the camera resolution")
    n = len(gaussians)
    if n == 0:
        return RenderGradients(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)), np.zeros(6))
    pr = _project(gaussians, camera_pose, intr)
    z = pr.p_cam[:, 2]
    if forward is None:
        forward = render(gaussians, camera_pose, intr)
    gu, gv, gconic, gop, gcol, gz = _raster.composite_backward(
        pr.order, pr.u, pr.v, pr.conic, pr.opac, gaussians.colors, z, pr.box, H, W,
        forward.color, forward.depth, forward.alpha,
        np.ascontiguousarray(grad_color, dtype=np.float64),
        np.ascontiguousarray(grad_depth, dtype=np.float64),
        np.ascontiguousarray(grad_alpha, dtype=np.float64),
    )
    vis = pr.visible
    fx, fy = intr.fx, intr.fy
    x, y = pr.p_cam[:, 0], pr.p_cam[:, 1]
    zs = np.where(vis, z, 1.0)

    # conic -> 2D covariance
    A = np.empty((n, 2, 2))
    A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1] = pr.conic[:, 0], pr.conic[:, 1], pr.conic[:, 1], pr.conic[:, 2]
    GA = np.empty((n, 2, 2))
    GA[:, 0, 0], GA[:, 1, 1] = gconic[:, 0], gconic[:, 2]
    GA[:, 0, 1] = GA[:, 1, 0] = 0.5 * gconic[:, 1]
    GS = -A @ GA @ A

    # 2D covariance -> camera covariance and projection Jacobian
    J = pr.J
    Jt = np.transpose(J, (0, 2, 1))
    G_cov_c = Jt @ GS @ J
    GJ = 2.0 * GS @ J @ pr.cov_cam

    g_p = np.zeros((n, 3))
    g_p[:, 0] = gu * fx / zs + GJ[:, 0, 2] * (-fx / zs**2)
    g_p[:, 1] = gv * fy / zs + GJ[:, 1, 2] * (-fy / zs**2)
    g_p[:, 2] = (
        gz
        - gu * fx * x / zs**2
        - gv * fy * y / zs**2
        - GJ[:, 0, 0] * fx / zs**2
        + GJ[:, 0, 2] * 2 * fx * x / zs**3
        - GJ[:, 1, 1] * fy / zs**2
        + GJ[:, 1, 2] * 2 * fy * y / zs**3
    )
    g_p[~vis] = 0.0
    G_cov_c[~vis] = 0.0

    # camera -> world
    Rcw = camera_pose.R.T
    d_mean = g_p @ Rcw
    G_cov_w = Rcw.T @ G_cov_c @ Rcw
    Rg = quat_to_matrix(gaussians.rots)
    M = Rg * gaussians.scales[:, None, :]
    GM = 2.0 * G_cov_w @ M
    d_scale = np.sum(GM * Rg, axis=1)
    d_rot = _quat_backward(gaussians.rots, GM * gaussians.scales[:, None, :])
    op = pr.opac
    d_opacity = gop * op * (1.0 - op)
    d_opacity[~vis] = 0.0

    # camera increment: p_c -> exp(-delta) p_c, cov_c -> R(-phi) cov_c R(-phi)^T
    d_rho = -g_p.sum(axis=0)
    d_phi = np.cross(g_p, pr.p_cam).sum(axis=0)
    P = G_cov_c @ pr.cov_cam
    K = (P - np.transpose(P, (0, 2, 1))).sum(axis=0)
    d_phi += np.array([K[1, 2] - K[2, 1], K[2, 0] - K[0, 2], K[0, 1] - K[1, 0]])
    return RenderGradients(d_mean, d_scale, d_rot, d_opacity, gcol, np.concatenate([d_rho, d_phi]))


def save_debug_images(out: RenderOutput, prefix) -> None:
    """8-bit PNG color/alpha and 16-bit millimeter depth PNG."""
    from PIL import Image

    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(out.color, 0, 1) * 255).astype(np.uint8)).save(f"{prefix}_color.png")
    Image.fromarray(np.round(np.clip(out.alpha, 0, 1) * 255).astype(np.uint8)).save(f"{prefix}_alpha.png")
    mm = np.clip(np.round(out.depth * 1000.0), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(f"{prefix}_depth.png")
