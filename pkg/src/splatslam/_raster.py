"""Compositing kernels. Gaussians are visited in global front-to-back order and
splatted over their 3-sigma boxes, so every pixel composites in depth order."""

import numpy as np
from numba import njit

ALPHA_MAX = 0.99


@njit(cache=True)
def composite_forward(order, u, v, conic, opac, colors, z, box, H, W):
    color = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    alpha = np.zeros((H, W))
    T = np.ones((H, W))
    for g in order:
        a, b, c = conic[g, 0], conic[g, 1], conic[g, 2]
        for py in range(box[g, 2], box[g, 3] + 1):
            dy = py - v[g]
            for px in range(box[g, 0], box[g, 1] + 1):
                dx = px - u[g]
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                al = opac[g] * np.exp(-0.5 * q)
                if al > ALPHA_MAX:
                    al = ALPHA_MAX
                t = T[py, px]
                w = al * t
                color[py, px, 0] += w * colors[g, 0]
                color[py, px, 1] += w * colors[g, 1]
                color[py, px, 2] += w * colors[g, 2]
                depth[py, px] += w * z[g]
                alpha[py, px] += w
                T[py, px] = t * (1.0 - al)
    return color, depth, alpha


@njit(cache=True)
def composite_backward(order, u, v, conic, opac, colors, z, box, H, W,
                       c_tot, d_tot, a_tot, g_color, g_depth, g_alpha):
    """Per-Gaussian gradients w.r.t. (u, v, conic a/b/c, opacity value, color, z).

    The contribution behind splat i is recovered as (total - accumulated)/(1 - alpha_i),
    which needs no division by transmittance.
    """
    n = len(u)
    gu = np.zeros(n)
    gv = np.zeros(n)
    gconic = np.zeros((n, 3))
    gop = np.zeros(n)
    gcol = np.zeros((n, 3))
    gz = np.zeros(n)
    T = np.ones((H, W))
    c_acc = np.zeros((H, W, 3))
    d_acc = np.zeros((H, W))
    a_acc = np.zeros((H, W))
    for g in order:
        a, b, c = conic[g, 0], conic[g, 1], conic[g, 2]
        col0, col1, col2 = colors[g, 0], colors[g, 1], colors[g, 2]
        for py in range(box[g, 2], box[g, 3] + 1):
            dy = py - v[g]
            for px in range(box[g, 0], box[g, 1] + 1):
                dx = px - u[g]
                q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                G = np.exp(-0.5 * q)
                al = opac[g] * G
                clamped = al > ALPHA_MAX
                if clamped:
                    al = ALPHA_MAX
                t = T[py, px]
                w = al * t
                c_acc[py, px, 0] += w * col0
                c_acc[py, px, 1] += w * col1
                c_acc[py, px, 2] += w * col2
                d_acc[py, px] += w * z[g]
                a_acc[py, px] += w
                T[py, px] = t * (1.0 - al)

                gc0 = g_color[py, px, 0]
                gc1 = g_color[py, px, 1]
                gc2 = g_color[py, px, 2]
                gd = g_depth[py, px]
                ga = g_alpha[py, px]
                gcol[g, 0] += gc0 * w
                gcol[g, 1] += gc1 * w
                gcol[g, 2] += gc2 * w
                gz[g] += gd * w
                if clamped:
                    continue
                inv = 1.0 / (1.0 - al)
                dal = (
                    gc0 * (t * col0 - (c_tot[py, px, 0] - c_acc[py, px, 0]) * inv)
                    + gc1 * (t * col1 - (c_tot[py, px, 1] - c_acc[py, px, 1]) * inv)
                    + gc2 * (t * col2 - (c_tot[py, px, 2] - c_acc[py, px, 2]) * inv)
                    + gd * (t * z[g] - (d_tot[py, px] - d_acc[py, px]) * inv)
                    + ga * (t - (a_tot[py, px] - a_acc[py, px]) * inv)
                )
                gop[g] += dal * G
                dq = -0.5 * al * dal
                gu[g] += dq * (-2.0 * (a * dx + b * dy))
                gv[g] += dq * (-2.0 * (b * dx + c * dy))
                gconic[g, 0] += dq * dx * dx
                gconic[g, 1] += dq * 2.0 * dx * dy
                gconic[g, 2] += dq * dy * dy
    return gu, gv, gconic, gop, gcol, gz
