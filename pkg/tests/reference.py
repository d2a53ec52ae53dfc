"""Slow float64 reference implementations the fast paths are checked against."""

from __future__ import annotations

import numpy as np

from kinsplat.scene import CameraPose, GaussianDeltas, Scene, eval_sh_batch, sigmoid
from kinsplat import rasterizer as rz

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
T_STOP = 1e-4


def reference_render(scene: Scene, cam: CameraPose, deltas: GaussianDeltas | None = None):
    """Per-pixel float64 forward with the kernel's exact clamp/skip/stop rules.

    Every projected splat is evaluated at every pixel (no tiling, no bounding
    boxes). A pixel stops dead the first time blending a splat would push its
    transmittance below T_STOP; that splat and all later ones are ignored,
    matching the kernel's early-stop break.
    """
    mu, rot, ls = rz._resolve_params(scene, deltas)
    p = rz._project_batch(mu, rot, ls, cam)
    order = np.flatnonzero(p["valid"])
    order = order[np.argsort(p["t"][order, 2], kind="stable")]
    view = p["mu64"][order] - cam.camera_center()
    dirs = view / np.linalg.norm(view, axis=1, keepdims=True)
    colors, _, _ = eval_sh_batch(scene.sh_coeffs[order].astype(np.float64), dirs,
                                 scene.active_sh_degree)
    opac = sigmoid(scene.opacity_logit[order].astype(np.float64))
    h, w = cam.height, cam.width
    ys, xs = np.mgrid[0:h, 0:w]
    img = np.zeros((h, w, 3))
    T = np.ones((h, w))
    done = np.zeros((h, w), dtype=bool)
    for k in range(order.size):
        ca, cb, cc = p["conic"][order[k]]
        dx = xs - p["u"][order[k]]
        dy = ys - p["v"][order[k]]
        power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
        alpha = np.minimum(opac[k] * np.exp(np.minimum(power, 0.0)), ALPHA_MAX)
        alpha[power > 0] = 0.0
        alpha[alpha < ALPHA_MIN] = 0.0
        t_next = T * (1.0 - alpha)
        done |= (~done) & (t_next < T_STOP) & (alpha > 0)
        use = (~done) & (alpha > 0)
        weight = np.where(use, alpha * T, 0.0)
        img += weight[..., None] * np.maximum(colors[k], 0.0)
        T = np.where(use, t_next, T)
    return img, 1.0 - T


def blend_splats_bruteforce(splats, pixel):
    """Direct expansion of front-to-back alpha compositing at one pixel.

    Independent of the rasterizer: takes (uv, conic(a, b, c), color, opacity)
    tuples already sorted near-to-far and composites them with the clamp and
    skip rules, without the early-stop optimization (callers keep total
    opacity low enough that it cannot trigger).
    """
    px, py = float(pixel[0]), float(pixel[1])
    rgb = np.zeros(3)
    T = 1.0
    for (u, v), (a, b, c), color, opacity in splats:
        dx, dy = px - u, py - v
        power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
        if power > 0:
            continue
        alpha = min(opacity * np.exp(power), ALPHA_MAX)
        if alpha < ALPHA_MIN:
            continue
        rgb += T * alpha * np.maximum(np.asarray(color, dtype=np.float64), 0.0)
        T *= 1.0 - alpha
    return rgb, 1.0 - T


def full_loss(img: np.ndarray, gt: np.ndarray, lam: float = 0.1):
    """Training loss mirrored in float64 for finite differences."""
    from kinsplat.metrics import ssim_with_grad

    l1 = np.abs(img - gt).mean()
    s, gs = ssim_with_grad(img, gt)
    value = (1.0 - lam) * l1 + lam * (1.0 - s) / 2.0
    grad = (1.0 - lam) * np.sign(img - gt) / img.size - lam * 0.5 * gs
    return value, grad
