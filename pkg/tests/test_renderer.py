import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatslam.geometry import CameraIntrinsics, Pose, compose
from splatslam.renderer import render, render_backward, save_debug_images
from splatslam.splat import Gaussians, logit

from conftest import random_pose
from support import GRAD_INTR, gradient_errors, gradient_scene

INTR = CameraIntrinsics(50.0, 50.0, 15.0, 11.0, 31, 23)


def _splats(means, colors, opacity, scale=0.05):
    n = len(means)
    return Gaussians(np.asarray(means, float), np.full((n, 3), scale), np.tile([1.0, 0, 0, 0], (n, 1)),
                     np.full(n, logit(opacity)), np.asarray(colors, float))


def test_empty_scene_renders_background():
    out = render(Gaussians.empty(), Pose.identity(), INTR)
    assert not out.alpha.any() and not out.color.any() and not out.depth.any()


def test_single_splat_on_axis():
    out = render(_splats([[0, 0, 2.0]], [[1, 1, 1]], 0.95), Pose.identity(), INTR)
    peak = np.unravel_index(np.argmax(out.alpha), out.alpha.shape)
    assert peak == (11, 15)
    # expected depth is alpha-weighted, so depth / alpha recovers z exactly
    assert abs(out.depth[peak] / out.alpha[peak] - 2.0) < 1e-3
    assert abs(out.alpha[peak] - 0.95) < 1e-12


def test_two_splats_on_one_ray_composite_front_to_back():
    g = _splats([[0, 0, 3.0], [0, 0, 2.0]], [[0, 0, 1], [1, 0, 0]], 0.9)
    out = render(g, Pose.identity(), INTR)
    assert np.allclose(out.color[11, 15], 0.9 * np.array([1, 0, 0]) + 0.1 * 0.9 * np.array([0, 0, 1]), atol=1e-12)
    assert np.isclose(out.alpha[11, 15], 1 - 0.1 * 0.1)


def test_insertion_order_does_not_matter(rng):
    g, pose = gradient_scene(rng, 60)
    perm = rng.permutation(60)
    a = render(g, pose, GRAD_INTR)
    b = render(g.subset(perm), pose, GRAD_INTR)
    assert np.array_equal(a.color, b.color) and np.array_equal(a.alpha, b.alpha)


def test_output_ranges_and_alpha_bound(rng):
    g, pose = gradient_scene(rng, 80)
    out = render(g, pose, GRAD_INTR)
    assert out.alpha.min() >= 0 and out.alpha.max() <= 1
    assert out.color.min() >= 0 and out.color.max() <= 1
    assert np.all(out.depth[out.alpha > 0] >= 0)


def test_render_is_deterministic(rng):
    g, pose = gradient_scene(rng, 80)
    a, b = render(g, pose, GRAD_INTR), render(g, pose, GRAD_INTR)
    assert np.array_equal(a.color, b.color) and np.array_equal(a.depth, b.depth)


def test_nonfinite_parameters_raise(rng):
    g, pose = gradient_scene(rng, 10)
    g.scales[7, 0] = np.inf
    with pytest.raises(ValueError, match="7"):
        render(g, pose, GRAD_INTR)


def test_zero_loss_gradient_gives_zero_gradients(rng):
    g, pose = gradient_scene(rng, 30)
    H, W = GRAD_INTR.height, GRAD_INTR.width
    gr = render_backward(g, pose, GRAD_INTR, np.zeros((H, W, 3)), np.zeros((H, W)), np.zeros((H, W)))
    for k in ("d_mean", "d_scale", "d_rot", "d_opacity", "d_color", "d_pose"):
        assert not np.any(getattr(gr, k))


def test_mismatched_gradient_shapes_raise(rng):
    g, pose = gradient_scene(rng, 5)
    with pytest.raises(ValueError):
        render_backward(g, pose, GRAD_INTR, np.zeros((3, 3, 3)), np.zeros((3, 3)), np.zeros((3, 3)))


def test_single_splat_color_gradient():
    g = _splats([[0.02, -0.01, 2.0]], [[0.3, 0.6, 0.2]], 0.7)
    H, W = INTR.height, INTR.width
    gr = render_backward(g, Pose.identity(), INTR, np.ones((H, W, 3)), np.zeros((H, W)), np.zeros((H, W)))
    h = 1e-5
    for c in range(3):
        gp, gm = g.copy(), g.copy()
        gp.colors[0, c] += h
        gm.colors[0, c] -= h
        fd = (render(gp, Pose.identity(), INTR).color.sum() - render(gm, Pose.identity(), INTR).color.sum()) / (2 * h)
        assert abs(gr.d_color[0, c] - fd) <= 1e-4 * abs(fd)


def test_random_scene_gradients_match_finite_differences(rng):
    g, pose = gradient_scene(rng, 50)
    errs = gradient_errors(g, pose, rng)
    assert max(errs.values()) < 1e-3, errs


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pose_gradient_is_invariant_to_joint_rigid_motion(seed):
    rng = np.random.default_rng(seed)
    g, pose = gradient_scene(rng, 40)
    H, W = GRAD_INTR.height, GRAD_INTR.width
    gc, gd, ga = rng.normal(size=(H, W, 3)), rng.normal(size=(H, W)), rng.normal(size=(H, W))
    T = random_pose(rng)
    a = render_backward(g, pose, GRAD_INTR, gc, gd, ga).d_pose
    b = render_backward(g.transformed(T), compose(T, pose), GRAD_INTR, gc, gd, ga).d_pose
    assert np.allclose(a, b, atol=1e-9 * max(1.0, np.abs(a).max()))


def test_debug_images(tmp_path, rng):
    from PIL import Image

    g, pose = gradient_scene(rng, 20)
    out = render(g, pose, GRAD_INTR)
    save_debug_images(out, tmp_path / "dbg" / "view")
    d = np.array(Image.open(tmp_path / "dbg" / "view_depth.png"))
    assert d.dtype == np.uint16 and d.shape == (48, 64)
    assert np.array(Image.open(tmp_path / "dbg" / "view_color.png")).shape == (48, 64, 3)
