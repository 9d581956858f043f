"""Trajectory and image evaluation metrics."""

from __future__ import annotations

import numpy as np
from scipy.signal import convolve2d

from ..geometry import valid_depth_mask
from ..renderer import RenderOutput
from .dataset import Trajectory

PSNR_CAP = 100.0
ASSOC_WINDOW = 0.02


def associate(est: Trajectory, gt: Trajectory, window: float = ASSOC_WINDOW) -> list[tuple[int, int]]:
    """Nearest ground-truth timestamp for every estimated pose, within ``window`` seconds."""
    if len(gt) == 0:
        return []
    pairs = []
    ts = gt.timestamps
    for i, t in enumerate(est.timestamps):
        j = int(np.searchsorted(ts, t))
        best = None
        for c in (j - 1, j):
            if 0 <= c < len(ts) and (best is None or abs(ts[c] - t) < abs(ts[best] - t)):
                best = c
        if best is not None and abs(ts[best] - t) <= window:
            pairs.append((i, best))
    return pairs


def align_rigid(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """R, t minimizing sum |R src + t - dst|^2 (no scale)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    C = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ S @ Vt
    return R, mu_d - R @ mu_s


def ate_rmse(est: Trajectory, gt: Trajectory, window: float = ASSOC_WINDOW) -> float:
    pairs = associate(est, gt, window)
    if len(pairs) < 3:
        raise ValueError(f"need at least 3 associated poses for ATE, got {len(pairs)}")
    P = est.positions()[[i for i, _ in pairs]]
    Q = gt.positions()[[j for _, j in pairs]]
    R, t = align_rigid(P, Q)
    err = P @ R.T + t - Q
    return float(np.sqrt(np.mean(np.sum(err**2, axis=1))))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean SSIM over valid 11x11 windows, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    w = _gaussian_window()
    C1, C2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        f = lambda img: convolve2d(img, w, mode="valid")  # noqa: E731
        mx, my = f(x), f(y)
        sxx = f(x * x) - mx * mx
        syy = f(y * y) - my * my
        sxy = f(x * y) - mx * my
        num = (2 * mx * my + C1) * (2 * sxy + C2)
        den = (mx * mx + my * my + C1) * (sxx + syy + C2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


def image_metrics(render: RenderOutput, kf, max_depth: float = 20.0) -> dict:
    if render.color.shape != kf.color.shape:
        raise ValueError("render and keyframe resolution differ")
    valid = valid_depth_mask(kf.depth, max_depth)
    dl1 = float(np.mean(np.abs(render.depth[valid] - kf.depth[valid]))) if valid.any() else 0.0
    return {"psnr": psnr(render.color, kf.color), "ssim": ssim(render.color, kf.color), "depth_l1": dl1}
