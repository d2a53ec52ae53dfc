"""Differentiable CPU rasterizer for anisotropic Gaussian scenes.

Forward model, per Gaussian:

1. world-space covariance sigma = R S S^T R^T from quaternion and log scales;
2. camera transform t = W_r mu + t_c, cull behind the near plane (z <= 0.01);
3. perspective projection u = fx x/z + cx, v = fy y/z + cy;
4. 2D covariance sigma' = J W_r sigma W_r^T J^T + 0.3 I with the local affine
   Jacobian J (camera-ratio terms clamped to a guard band), then cull splats
   whose 3-sigma footprint misses the image;
5. view-dependent color from SH at the direction camera -> center;
6. depth-sorted front-to-back alpha blending per pixel with alpha clamped at
   0.99, contributions below 1/255 skipped, early stop once transmittance
   drops under 1e-4, black background.

The backward pass is fully analytic and mirrors the truncated forward sum.
Blending runs in float32 numba kernels; the per-splat projection chain runs
in float64 numpy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _blend
from .scene import (
    CameraPose,
    Gaussian,
    GaussianDeltas,
    Scene,
    eval_sh_batch,
    quat_to_rotmat,
    sh_basis_grad,
    sigmoid,
)

NEAR_PLANE = 0.01
COV2D_LOWPASS = 0.3
RADIUS_SIGMAS = 3.0
JACOBIAN_GUARD = 1.3  # ratio clamp, in units of the image half-angle tangent
TILE = 16

ALPHA_MAX = _blend.ALPHA_MAX
ALPHA_MIN = _blend.ALPHA_MIN
T_STOP = _blend.T_STOP


@dataclass
class Splat2D:
    """A projected Gaussian ready for blending."""

    uv: np.ndarray  # (2,) pixel coordinates of the center
    cov2d: np.ndarray  # (2, 2) regularized screen-space covariance
    depth: float  # camera-space z
    color: np.ndarray  # (3,) realized RGB
    opacity: float  # sigmoid(opacity_logit), before the 0.99 alpha clamp


@dataclass
class RenderOutput:
    image: np.ndarray  # (H, W, 3) float32, >= 0, may exceed 1
    alpha: np.ndarray  # (H, W) float32 accumulated opacity
    per_gaussian_max_alpha: np.ndarray  # (N,) max blended alpha of each input Gaussian
    visible: np.ndarray  # (N,) bool, True if the Gaussian survived culling


class RenderCache:
    """Forward-pass intermediates kept for the analytic backward pass."""

    __slots__ = (
        "n_total", "degree", "cam", "valid_idx", "order",
        "mu_w", "q_raw", "q_unit", "q_norm", "R", "s", "sigma3", "M3",
        "t_cam", "in_x", "in_y", "clamp_x", "clamp_y",
        "U", "J", "conic", "sig_opac",
        "dirs", "vnorm", "basis", "raw_rgb", "coeffs",
        "uv32", "conic32", "opac32", "rgb32", "starts", "entries",
        "alpha_map", "n_contrib", "max_alpha", "width", "height",
    )


def _camera_parts(cam: CameraPose):
    Wr = cam.rotation.astype(np.float64)
    tv = cam.translation.astype(np.float64)
    return Wr, tv, float(cam.fx), float(cam.fy), float(cam.cx), float(cam.cy)


def _resolve_params(scene: Scene, deltas: GaussianDeltas | None):
    """Apply additive deltas to the raw scene parameters (float32 math)."""
    if deltas is None:
        return scene.mu, scene.rot, scene.log_scale
    if len(deltas) != len(scene):
        raise ValueError(f"deltas length {len(deltas)} != scene length {len(scene)}")
    return (
        scene.mu + np.asarray(deltas.d_mu, dtype=np.float32),
        scene.rot + np.asarray(deltas.d_rot, dtype=np.float32),
        scene.log_scale + np.asarray(deltas.d_scale, dtype=np.float32),
    )


def _project_batch(mu, rot, log_scale, cam: CameraPose):
    """Project all Gaussians; returns intermediates in float64 plus validity.

    Culling: behind the near plane, or the 3-sigma screen footprint entirely
    outside the image.
    """
    Wr, tv, fx, fy, cx, cy = _camera_parts(cam)
    width, height = cam.width, cam.height
    mu64 = mu.astype(np.float64)
    nq = np.linalg.norm(rot.astype(np.float64), axis=1)
    bad = nq < 1e-12
    if np.any(bad):
        raise ValueError("zero-norm quaternion during projection")
    q_unit = rot.astype(np.float64) / nq[:, None]
    R = quat_to_rotmat(q_unit)
    s = np.exp(log_scale.astype(np.float64))
    M3 = R * s[:, None, :]
    sigma3 = M3 @ np.swapaxes(M3, 1, 2)

    t = mu64 @ Wr.T + tv
    z = t[:, 2]
    in_front = z > NEAR_PLANE
    zs = np.where(in_front, z, 1.0)  # avoid div warnings for culled rows

    u = fx * t[:, 0] / zs + cx
    v = fy * t[:, 1] / zs + cy

    limx = JACOBIAN_GUARD * 0.5 * width / fx
    limy = JACOBIAN_GUARD * 0.5 * height / fy
    rx = t[:, 0] / zs
    ry = t[:, 1] / zs
    crx = np.clip(rx, -limx, limx)
    cry = np.clip(ry, -limy, limy)
    in_x = (rx == crx).astype(np.float64)
    in_y = (ry == cry).astype(np.float64)

    n = mu.shape[0]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = fx / zs
    J[:, 0, 2] = -fx * crx / zs
    J[:, 1, 1] = fy / zs
    J[:, 1, 2] = -fy * cry / zs
    U = J @ Wr
    cov2d = U @ sigma3 @ np.swapaxes(U, 1, 2)
    cov2d[:, 0, 0] += COV2D_LOWPASS
    cov2d[:, 1, 1] += COV2D_LOWPASS

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    mid = 0.5 * (a + c)
    lam1 = mid + np.sqrt(np.maximum(mid * mid - det, 1e-12))
    radius = np.ceil(RADIUS_SIGMAS * np.sqrt(lam1))  # cull test: 3-sigma footprint

    on_image = (
        (u + radius >= 0.0)
        & (u - radius <= width - 1.0)
        & (v + radius >= 0.0)
        & (v - radius <= height - 1.0)
    )
    valid = in_front & on_image & (det > 0.0)

    inv_det = np.where(det != 0.0, 1.0 / det, 0.0)
    conic = np.stack([c * inv_det, -b * inv_det, a * inv_det], axis=1)
    return {
        "q_unit": q_unit, "q_norm": nq, "R": R, "s": s, "M3": M3, "sigma3": sigma3,
        "t": t, "u": u, "v": v, "J": J, "U": U, "cov2d": cov2d, "conic": conic,
        "radius": radius, "lam1": lam1, "valid": valid,
        "in_x": in_x, "in_y": in_y, "clamp_x": crx, "clamp_y": cry,
        "mu64": mu64,
    }


def project(g: Gaussian, cam: CameraPose, sh_degree: int = 3) -> Splat2D | None:
    """Project a single Gaussian; None if culled."""
    p = _project_batch(
        np.asarray(g.mu, np.float32).reshape(1, 3),
        np.asarray(g.rot, np.float32).reshape(1, 4),
        np.asarray(g.log_scale, np.float32).reshape(1, 3),
        cam,
    )
    if not p["valid"][0]:
        return None
    vdir = p["mu64"][0] - cam.camera_center()
    vdir = vdir / np.linalg.norm(vdir)
    color, _, _ = eval_sh_batch(
        np.asarray(g.sh_coeffs, np.float64)[None], vdir[None], sh_degree
    )
    return Splat2D(
        uv=np.array([p["u"][0], p["v"][0]]),
        cov2d=p["cov2d"][0],
        depth=float(p["t"][0, 2]),
        color=color[0],
        opacity=float(sigmoid(np.float64(g.opacity_logit))),
    )


def alpha_at(splat: Splat2D, pixel) -> float:
    """Blending alpha of one splat at a pixel center.

    Clamped at 0.99; values below 1/255 are zeroed (the splat is skipped).
    """
    d = np.asarray(pixel, dtype=np.float64) - splat.uv
    cov = splat.cov2d
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if det <= 0.0:
        raise ValueError("2D covariance is not invertible")
    ca = cov[1, 1] / det
    cb = -cov[0, 1] / det
    cc = cov[0, 0] / det
    power = -0.5 * (ca * d[0] * d[0] + cc * d[1] * d[1]) - cb * d[0] * d[1]
    if power > 0.0:
        return 0.0
    alpha = min(splat.opacity * math.exp(power), ALPHA_MAX)
    return alpha if alpha >= ALPHA_MIN else 0.0


def blend_pixel(splats, pixel):
    """Front-to-back blend of depth-sorted splats at one pixel.

    Stops before the splat that would push transmittance under 1e-4.

    Returns:
        (rgb (3,), total alpha, per-splat transmittance array holding the
        transmittance in effect when each splat was considered).
    """
    rgb = np.zeros(3)
    T = 1.0
    trans = np.empty(len(splats))
    for k, s in enumerate(splats):
        trans[k] = T
        a = alpha_at(s, pixel)
        if a <= 0.0:
            continue
        T_next = T * (1.0 - a)
        if T_next < T_STOP:
            trans[k + 1:] = T
            break
        rgb += a * T * np.asarray(s.color, dtype=np.float64)
        T = T_next
    return rgb, 1.0 - T, trans


def _empty_output(scene: Scene, cam: CameraPose) -> RenderOutput:
    n = len(scene)
    return RenderOutput(
        image=np.zeros((cam.height, cam.width, 3), np.float32),
        alpha=np.zeros((cam.height, cam.width), np.float32),
        per_gaussian_max_alpha=np.zeros(n, np.float32),
        visible=np.zeros(n, bool),
    )


def render_forward(scene: Scene, cam: CameraPose, deltas: GaussianDeltas | None = None):
    """Full forward pass. Returns (RenderOutput, RenderCache).

    The cache feeds :func:`backward_from_cache`; callers that only need the
    image can use :func:`render`.
    """
    n = len(scene)
    if n == 0:
        return _empty_output(scene, cam), None
    mu, rot, log_scale = _resolve_params(scene, deltas)
    p = _project_batch(mu, rot, log_scale, cam)
    valid = p["valid"]
    idx = np.flatnonzero(valid)
    if idx.size == 0:
        return _empty_output(scene, cam), None

    # Depth sort (stable: ties keep original index order).
    order = idx[np.argsort(p["t"][idx, 2], kind="stable")]

    cam_center = cam.camera_center()
    vvec = p["mu64"][order] - cam_center
    vnorm = np.linalg.norm(vvec, axis=1)
    dirs = vvec / vnorm[:, None]
    coeffs = scene.sh_coeffs[order].astype(np.float64)
    colors, basis, raw_rgb = eval_sh_batch(coeffs, dirs, scene.active_sh_degree)

    width, height = cam.width, cam.height
    uv32 = np.ascontiguousarray(
        np.stack([p["u"][order], p["v"][order]], axis=1), dtype=np.float32
    )
    conic32 = np.ascontiguousarray(p["conic"][order], dtype=np.float32)
    sig_opac = sigmoid(scene.opacity_logit[order].astype(np.float64))
    opac32 = np.ascontiguousarray(sig_opac, dtype=np.float32)
    rgb32 = np.ascontiguousarray(colors, dtype=np.float32)

    # Tile bbox uses an opacity-aware radius: beyond it alpha < 1/255, so the
    # kernel's skip rule makes tiling pixel-exact (no truncation of visible
    # tails, unlike a hard 3-sigma box). Culling itself stays at 3 sigma.
    lam1 = p["lam1"][order]
    r = np.sqrt(2.0 * np.maximum(np.log(sig_opac / ALPHA_MIN), 0.0) * lam1)
    u, v = p["u"][order], p["v"][order]
    x0 = np.clip(np.floor(u - r), 0, width - 1).astype(np.int32)
    x1 = np.clip(np.ceil(u + r), 0, width - 1).astype(np.int32)
    y0 = np.clip(np.floor(v - r), 0, height - 1).astype(np.int32)
    y1 = np.clip(np.ceil(v + r), 0, height - 1).astype(np.int32)
    n_tiles_x = (width + TILE - 1) // TILE
    n_tiles_y = (height + TILE - 1) // TILE
    starts, entries = _blend.bin_tiles(
        x0 // TILE, x1 // TILE, y0 // TILE, y1 // TILE, n_tiles_x, n_tiles_x * n_tiles_y
    )

    image = np.zeros((height, width, 3), np.float32)
    alpha_map = np.zeros((height, width), np.float32)
    n_contrib = np.zeros((height, width), np.int64)
    max_alpha_sorted = np.zeros(order.size, np.float32)
    _blend.blend_forward(
        starts, entries, uv32, conic32, opac32, rgb32, width, height, TILE,
        image, alpha_map, n_contrib, max_alpha_sorted,
    )

    max_alpha = np.zeros(n, np.float32)
    max_alpha[order] = max_alpha_sorted
    out = RenderOutput(image=image, alpha=alpha_map, per_gaussian_max_alpha=max_alpha, visible=valid)

    c = RenderCache()
    c.n_total = n
    c.degree = scene.active_sh_degree
    c.cam = cam
    c.valid_idx = idx
    c.order = order
    c.mu_w = p["mu64"][order]
    c.q_unit = p["q_unit"][order]
    c.q_norm = p["q_norm"][order]
    c.R = p["R"][order]
    c.s = p["s"][order]
    c.sigma3 = p["sigma3"][order]
    c.M3 = p["M3"][order]
    c.t_cam = p["t"][order]
    c.in_x = p["in_x"][order]
    c.in_y = p["in_y"][order]
    c.clamp_x = p["clamp_x"][order]
    c.clamp_y = p["clamp_y"][order]
    c.U = p["U"][order]
    c.J = p["J"][order]
    c.conic = p["conic"][order]
    c.sig_opac = sig_opac
    c.dirs = dirs
    c.vnorm = vnorm
    c.basis = basis
    c.raw_rgb = raw_rgb
    c.coeffs = coeffs
    c.uv32 = uv32
    c.conic32 = conic32
    c.opac32 = opac32
    c.rgb32 = rgb32
    c.starts = starts
    c.entries = entries
    c.alpha_map = alpha_map
    c.n_contrib = n_contrib
    c.max_alpha = max_alpha_sorted
    c.width = width
    c.height = height
    return out, c


def render(scene: Scene, cam: CameraPose, deltas: GaussianDeltas | None = None) -> RenderOutput:
    """Render the scene (optionally deformed by ``deltas``) from ``cam``."""
    out, _ = render_forward(scene, cam, deltas)
    return out


def _quat_partials(q: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternions: (N, 4, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    d = np.zeros((q.shape[0], 4, 3, 3))
    d[:, 0, 0, 1] = -2 * z
    d[:, 0, 0, 2] = 2 * y
    d[:, 0, 1, 0] = 2 * z
    d[:, 0, 1, 2] = -2 * x
    d[:, 0, 2, 0] = -2 * y
    d[:, 0, 2, 1] = 2 * x
    d[:, 1, 0, 1] = 2 * y
    d[:, 1, 0, 2] = 2 * z
    d[:, 1, 1, 0] = 2 * y
    d[:, 1, 1, 1] = -4 * x
    d[:, 1, 1, 2] = -2 * w
    d[:, 1, 2, 0] = 2 * z
    d[:, 1, 2, 1] = 2 * w
    d[:, 1, 2, 2] = -4 * x
    d[:, 2, 0, 0] = -4 * y
    d[:, 2, 0, 1] = 2 * x
    d[:, 2, 0, 2] = 2 * w
    d[:, 2, 1, 0] = 2 * x
    d[:, 2, 1, 2] = 2 * z
    d[:, 2, 2, 0] = -2 * w
    d[:, 2, 2, 1] = 2 * z
    d[:, 2, 2, 2] = -4 * y
    d[:, 3, 0, 0] = -4 * z
    d[:, 3, 0, 1] = -2 * w
    d[:, 3, 0, 2] = 2 * x
    d[:, 3, 1, 0] = 2 * w
    d[:, 3, 1, 1] = -4 * z
    d[:, 3, 1, 2] = 2 * y
    d[:, 3, 2, 0] = 2 * x
    d[:, 3, 2, 1] = 2 * y
    return d


def backward_from_cache(
    scene: Scene,
    cache: RenderCache | None,
    dL_dimage: np.ndarray,
    update_grad_stats: bool = True,
) -> dict:
    """Analytic gradients of a scalar loss w.r.t. all Gaussian parameters.

    ``dL_dimage`` is the upstream gradient at the rendered image. Deltas are
    additive, so their gradients equal the base-parameter gradients; both
    keys are returned. When ``update_grad_stats`` is set, the scene's
    densification accumulators absorb this render's screen-space position
    gradients.
    """
    n = len(scene)
    zeros = {
        "mu": np.zeros((n, 3)), "rot": np.zeros((n, 4)), "log_scale": np.zeros((n, 3)),
        "opacity_logit": np.zeros(n), "sh_coeffs": np.zeros((n, 16, 3)),
    }
    if cache is None:
        zeros.update(d_mu=zeros["mu"], d_rot=zeros["rot"], d_scale=zeros["log_scale"])
        return zeros

    ns = cache.order.size
    dL_duv = np.zeros((ns, 2), np.float32)
    dL_dconic = np.zeros((ns, 3), np.float32)
    dL_dopac = np.zeros(ns, np.float32)
    dL_drgb = np.zeros((ns, 3), np.float32)
    _blend.blend_backward(
        cache.starts, cache.entries, cache.uv32, cache.conic32, cache.opac32,
        cache.rgb32, cache.width, cache.height, TILE,
        cache.alpha_map, cache.n_contrib,
        np.ascontiguousarray(dL_dimage, dtype=np.float32),
        dL_duv, dL_dconic, dL_dopac, dL_drgb,
    )

    Wr, _, fx, fy, _, _ = _camera_parts(cache.cam)
    g_uv = dL_duv.astype(np.float64)
    g_conic = dL_dconic.astype(np.float64)
    g_opac = dL_dopac.astype(np.float64)
    g_rgb = dL_drgb.astype(np.float64)

    # --- color / SH ---------------------------------------------------------
    mask = (cache.raw_rgb > 0.0).astype(np.float64)
    g_raw = g_rgb * mask
    k = cache.basis.shape[1]
    g_sh_sorted = np.zeros((ns, 16, 3))
    g_sh_sorted[:, :k, :] = cache.basis[:, :, None] * g_raw[:, None, :]
    dbasis = sh_basis_grad(cache.dirs, cache.degree)
    tmp = np.einsum("nkc,nc->nk", cache.coeffs[:, :k, :], g_raw)
    g_dir = np.einsum("nk,nkd->nd", tmp, dbasis)
    g_v = (g_dir - (g_dir * cache.dirs).sum(axis=1, keepdims=True) * cache.dirs) / cache.vnorm[:, None]
    g_mu = g_v.copy()  # view-direction path; projection path added below

    # --- opacity ------------------------------------------------------------
    g_logit = g_opac * cache.sig_opac * (1.0 - cache.sig_opac)

    # --- conic -> 2D covariance --------------------------------------------
    A = np.empty((ns, 2, 2))
    A[:, 0, 0] = cache.conic[:, 0]
    A[:, 0, 1] = A[:, 1, 0] = cache.conic[:, 1]
    A[:, 1, 1] = cache.conic[:, 2]
    G = np.empty((ns, 2, 2))
    G[:, 0, 0] = g_conic[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = 0.5 * g_conic[:, 1]
    G[:, 1, 1] = g_conic[:, 2]
    M = -np.einsum("nij,njk,nkl->nil", A, G, A)  # matrix grad at cov2d

    # --- cov2d = U sigma3 U^T + lowpass -------------------------------------
    g_U = 2.0 * np.einsum("nij,njk,nkl->nil", M, cache.U, cache.sigma3)
    g_sigma3 = np.einsum("nji,njk,nkl->nil", cache.U, M, cache.U)
    g_J = np.einsum("nij,kj->nik", g_U, Wr)

    # --- J and uv -> camera-space position ----------------------------------
    t = cache.t_cam
    z = t[:, 2]
    z2 = z * z
    g_t = np.zeros((ns, 3))
    g_t[:, 0] += g_uv[:, 0] * fx / z
    g_t[:, 1] += g_uv[:, 1] * fy / z
    g_t[:, 2] += -g_uv[:, 0] * fx * t[:, 0] / z2 - g_uv[:, 1] * fy * t[:, 1] / z2
    g_t[:, 2] += g_J[:, 0, 0] * (-fx / z2) + g_J[:, 1, 1] * (-fy / z2)
    # J02 = -fx * xh / z^2 with xh the clamped ratio times z.
    xh = cache.clamp_x * z
    yh = cache.clamp_y * z
    g_t[:, 2] += g_J[:, 0, 2] * (2.0 * fx * xh / (z2 * z)) + g_J[:, 1, 2] * (2.0 * fy * yh / (z2 * z))
    g_xh = g_J[:, 0, 2] * (-fx / z2)
    g_yh = g_J[:, 1, 2] * (-fy / z2)
    g_t[:, 0] += g_xh * cache.in_x
    g_t[:, 1] += g_yh * cache.in_y
    g_t[:, 2] += g_xh * (1.0 - cache.in_x) * cache.clamp_x
    g_t[:, 2] += g_yh * (1.0 - cache.in_y) * cache.clamp_y
    g_mu += g_t @ Wr

    # --- sigma3 -> rotation and scale ---------------------------------------
    g_M3 = 2.0 * np.einsum("nij,njk->nik", g_sigma3, cache.M3)
    g_R = g_M3 * cache.s[:, None, :]
    g_s = np.einsum("nij,nij->nj", g_M3, cache.R)
    g_logscale = g_s * cache.s
    dRdq = _quat_partials(cache.q_unit)
    g_qunit = np.einsum("nij,nkij->nk", g_R, dRdq)
    g_q = (g_qunit - (g_qunit * cache.q_unit).sum(axis=1, keepdims=True) * cache.q_unit)
    g_q /= cache.q_norm[:, None]

    # --- scatter back to original indices ------------------------------------
    grads = zeros
    grads["mu"][cache.order] = g_mu
    grads["rot"][cache.order] = g_q
    grads["log_scale"][cache.order] = g_logscale
    grads["opacity_logit"][cache.order] = g_logit
    grads["sh_coeffs"][cache.order] = g_sh_sorted
    grads["d_mu"] = grads["mu"].copy()
    grads["d_rot"] = grads["rot"].copy()
    grads["d_scale"] = grads["log_scale"].copy()

    if update_grad_stats:
        # Screen-space gradient magnitude in NDC units drives densification.
        gnorm = np.hypot(g_uv[:, 0] * cache.width * 0.5, g_uv[:, 1] * cache.height * 0.5)
        np.add.at(scene.grad_accum, cache.order, gnorm.astype(np.float32))
        np.add.at(scene.grad_count, cache.valid_idx, 1)
        np.add.at(scene.grad_dir, cache.order, g_mu.astype(np.float32))
    return grads


def render_backward(
    scene: Scene,
    cam: CameraPose,
    deltas: GaussianDeltas | None,
    dL_dimage: np.ndarray,
    update_grad_stats: bool = False,
) -> dict:
    """Convenience wrapper: rerun the forward pass, then differentiate."""
    _, cache = render_forward(scene, cam, deltas)
    return backward_from_cache(scene, cache, dL_dimage, update_grad_stats=update_grad_stats)
