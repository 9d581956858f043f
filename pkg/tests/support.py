"""Shared oracles for the unit tests and the acceptance suite."""

import numpy as np

from splatslam.geometry import CameraIntrinsics, PointCloud, Pose, compose, quat_normalize, se3_exp
from splatslam.renderer import render, render_backward
from splatslam.splat import Gaussians

GRAD_INTR = CameraIntrinsics(50.0, 50.0, 31.5, 23.5, 64, 48)
BLOCKS = [("means", "d_mean"), ("scales", "d_scale"), ("rots", "d_rot"), ("opacities", "d_opacity"),
          ("colors", "d_color")]


def gradient_scene(rng, n=100, intr=GRAD_INTR):
    """Splats spread over (and slightly beyond) the view, seen from a random pose."""
    z = rng.uniform(1.5, 4.0, n)
    u = rng.uniform(-5, intr.width + 5, n)
    v = rng.uniform(-5, intr.height + 5, n)
    pc = np.stack([(u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z], 1)
    g = Gaussians(pc, rng.uniform(0.02, 0.12, (n, 3)), quat_normalize(rng.normal(size=(n, 4))),
                  rng.uniform(-2.0, 1.5, n), rng.uniform(0, 1, (n, 3)))
    pose = se3_exp(rng.normal(size=6) * 0.05)
    return g.transformed(pose), pose


def gradient_errors(g, pose, rng, intr=GRAD_INTR, h=1e-6, n_entries=12, n_dirs=3):
    """Relative error of every analytic gradient block against central differences.

    Each block is probed along random directions and on random single entries;
    the error is ||analytic - numeric|| / ||numeric|| over all probes.
    """
    H, W = intr.height, intr.width
    gc, gd, ga = rng.normal(size=(H, W, 3)), rng.normal(size=(H, W)), rng.normal(size=(H, W))

    def loss(gs, p):
        o = render(gs, p, intr)
        return float((o.color * gc).sum() + (o.depth * gd).sum() + (o.alpha * ga).sum())

    grads = render_backward(g, pose, intr, gc, gd, ga)
    errors = {}
    for attr, gname in BLOCKS:
        base = getattr(g, attr)
        an_full = getattr(grads, gname)
        dirs = [rng.normal(size=base.shape) for _ in range(n_dirs)]
        for flat in rng.choice(base.size, size=min(n_entries, base.size), replace=False):
            e = np.zeros(base.size)
            e[flat] = 1.0
            dirs.append(e.reshape(base.shape))
        an, fd = [], []
        for d in dirs:
            gp, gm = g.copy(), g.copy()
            getattr(gp, attr)[...] += h * d
            getattr(gm, attr)[...] -= h * d
            fd.append((loss(gp, pose) - loss(gm, pose)) / (2 * h))
            an.append(float((an_full * d).sum()))
        errors[attr] = _rel(an, fd)
    an, fd = [], []
    for k in range(6):
        d = np.zeros(6)
        d[k] = h
        fd.append((loss(g, compose(pose, se3_exp(d))) - loss(g, compose(pose, se3_exp(-d)))) / (2 * h))
        an.append(grads.d_pose[k])
    errors["pose"] = _rel(an, fd)
    return errors


def _rel(an, fd) -> float:
    an, fd = np.asarray(an), np.asarray(fd)
    return float(np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-12))


def structured_cloud(rng, n=3000) -> np.ndarray:
    """A bumpy floor and two walls: constrains all six degrees of freedom."""
    m = n // 3
    a = rng.uniform(-1, 1, (m, 2))
    b = rng.uniform(-1, 1, (m, 2))
    c = rng.uniform(-1, 1, (m, 2))
    return np.concatenate([
        np.c_[a, 0.1 * np.sin(3 * a[:, 0]) * np.cos(2 * a[:, 1])],
        np.c_[b[:, 0], np.full(m, 1.0), b[:, 1] + 1],
        np.c_[np.full(m, -1.0), c[:, 0], c[:, 1] + 1],
    ])


def random_small_motion(rng, max_t=0.2, max_deg=10.0) -> Pose:
    ax = rng.normal(size=3)
    ax /= np.linalg.norm(ax)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return se3_exp(np.r_[d * rng.uniform(0, max_t), ax * np.deg2rad(rng.uniform(0, max_deg))])


def cloud(points) -> PointCloud:
    return PointCloud(np.asarray(points, dtype=float))


# criterion number -> one-line verdict, echoed again in the terminal summary
ACCEPTANCE: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)
