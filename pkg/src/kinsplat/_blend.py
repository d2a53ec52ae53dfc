"""Numba kernels for tiled alpha blending, forward and backward.

Splats arrive depth-sorted; binning preserves that order per tile, so each
pixel walks its tile's list front to back. All kernels are single-threaded
with fixed iteration order, keeping float accumulation deterministic.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4


@njit(cache=True)
def bin_tiles(tx0, tx1, ty0, ty1, n_tiles_x, n_tiles):
    """Counting-sort splats into per-tile lists.

    Tile ranges are inclusive per splat. Returns (starts, entries): tile t
    owns entries[starts[t]:starts[t+1]], depth-ordered because splats are
    visited in sorted order.
    """
    n = tx0.shape[0]
    starts = np.zeros(n_tiles + 1, dtype=np.int64)
    for i in range(n):
        for ty in range(ty0[i], ty1[i] + 1):
            base = ty * n_tiles_x
            for tx in range(tx0[i], tx1[i] + 1):
                starts[base + tx + 1] += 1
    for t in range(n_tiles):
        starts[t + 1] += starts[t]
    entries = np.empty(starts[n_tiles], dtype=np.int32)
    cursor = starts[:n_tiles].copy()
    for i in range(n):
        for ty in range(ty0[i], ty1[i] + 1):
            base = ty * n_tiles_x
            for tx in range(tx0[i], tx1[i] + 1):
                t = base + tx
                entries[cursor[t]] = i
                cursor[t] += 1
    return starts, entries


@njit(cache=True)
def blend_forward(starts, entries, uv, conic, opac, rgb, width, height, tile,
                  image, alpha_map, n_contrib, max_alpha):
    """Front-to-back blending over a black background.

    Writes the (height, width, 3) image, per-pixel alpha, the per-pixel count
    of tile entries up to and including the last blended one (for the
    backward pass), and each splat's max blended alpha.
    """
    n_tiles_x = (width + tile - 1) // tile
    n_tiles_y = (height + tile - 1) // tile
    for t in range(n_tiles_x * n_tiles_y):
        ty = t // n_tiles_x
        tx = t - ty * n_tiles_x
        y_end = min((ty + 1) * tile, height)
        x_end = min((tx + 1) * tile, width)
        lo = starts[t]
        hi = starts[t + 1]
        for py in range(ty * tile, y_end):
            for px in range(tx * tile, x_end):
                T = np.float32(1.0)
                r = np.float32(0.0)
                g = np.float32(0.0)
                b = np.float32(0.0)
                last = 0
                for e in range(lo, hi):
                    i = entries[e]
                    dx = np.float32(px) - uv[i, 0]
                    dy = np.float32(py) - uv[i, 1]
                    power = (
                        np.float32(-0.5) * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy)
                        - conic[i, 1] * dx * dy
                    )
                    if power > 0.0:
                        continue
                    alpha = opac[i] * np.float32(math.exp(power))
                    if alpha > ALPHA_MAX:
                        alpha = np.float32(ALPHA_MAX)
                    if alpha < ALPHA_MIN:
                        continue
                    T_next = T * (np.float32(1.0) - alpha)
                    if T_next < T_STOP:
                        break
                    w = alpha * T
                    r += w * rgb[i, 0]
                    g += w * rgb[i, 1]
                    b += w * rgb[i, 2]
                    if alpha > max_alpha[i]:
                        max_alpha[i] = alpha
                    T = T_next
                    last = e - lo + 1
                image[py, px, 0] = r
                image[py, px, 1] = g
                image[py, px, 2] = b
                alpha_map[py, px] = np.float32(1.0) - T
                n_contrib[py, px] = last


@njit(cache=True)
def blend_backward(starts, entries, uv, conic, opac, rgb, width, height, tile,
                   alpha_map, n_contrib, dL_dimage,
                   dL_duv, dL_dconic, dL_dopac, dL_drgb):
    """Gradients of the blended image w.r.t. per-splat screen quantities.

    Walks each pixel's blended splats back to front, reconstructing the
    running transmittance from its final value. Skip rules mirror the
    forward pass exactly so the truncated sum is differentiated, not the
    ideal one.
    """
    n_tiles_x = (width + tile - 1) // tile
    n_tiles_y = (height + tile - 1) // tile
    for t in range(n_tiles_x * n_tiles_y):
        ty = t // n_tiles_x
        tx = t - ty * n_tiles_x
        y_end = min((ty + 1) * tile, height)
        x_end = min((tx + 1) * tile, width)
        lo = starts[t]
        for py in range(ty * tile, y_end):
            for px in range(tx * tile, x_end):
                last = n_contrib[py, px]
                if last == 0:
                    continue
                dpr = dL_dimage[py, px, 0]
                dpg = dL_dimage[py, px, 1]
                dpb = dL_dimage[py, px, 2]
                T = np.float32(1.0) - alpha_map[py, px]
                acc_r = np.float32(0.0)
                acc_g = np.float32(0.0)
                acc_b = np.float32(0.0)
                last_alpha = np.float32(0.0)
                last_r = np.float32(0.0)
                last_g = np.float32(0.0)
                last_b = np.float32(0.0)
                for e in range(lo + last - 1, lo - 1, -1):
                    i = entries[e]
                    dx = np.float32(px) - uv[i, 0]
                    dy = np.float32(py) - uv[i, 1]
                    power = (
                        np.float32(-0.5) * (conic[i, 0] * dx * dx + conic[i, 2] * dy * dy)
                        - conic[i, 1] * dx * dy
                    )
                    if power > 0.0:
                        continue
                    G = np.float32(math.exp(power))
                    alpha_raw = opac[i] * G
                    clamped = alpha_raw > ALPHA_MAX
                    alpha = np.float32(ALPHA_MAX) if clamped else alpha_raw
                    if alpha < ALPHA_MIN:
                        continue
                    T = T / (np.float32(1.0) - alpha)
                    w = alpha * T
                    dL_drgb[i, 0] += w * dpr
                    dL_drgb[i, 1] += w * dpg
                    dL_drgb[i, 2] += w * dpb
                    # Colors blended behind this splat, then the alpha grad.
                    acc_r = last_alpha * last_r + (np.float32(1.0) - last_alpha) * acc_r
                    acc_g = last_alpha * last_g + (np.float32(1.0) - last_alpha) * acc_g
                    acc_b = last_alpha * last_b + (np.float32(1.0) - last_alpha) * acc_b
                    dL_dalpha = (
                        (rgb[i, 0] - acc_r) * dpr
                        + (rgb[i, 1] - acc_g) * dpg
                        + (rgb[i, 2] - acc_b) * dpb
                    ) * T
                    last_alpha = alpha
                    last_r = rgb[i, 0]
                    last_g = rgb[i, 1]
                    last_b = rgb[i, 2]
                    if clamped:
                        continue  # saturated alpha: no flow into opacity/shape
                    dL_dG = opac[i] * dL_dalpha
                    dL_dpower = G * dL_dG
                    dL_dconic[i, 0] += np.float32(-0.5) * dx * dx * dL_dpower
                    dL_dconic[i, 1] += -dx * dy * dL_dpower
                    dL_dconic[i, 2] += np.float32(-0.5) * dy * dy * dL_dpower
                    dL_duv[i, 0] += (conic[i, 0] * dx + conic[i, 1] * dy) * dL_dpower
                    dL_duv[i, 1] += (conic[i, 2] * dy + conic[i, 1] * dx) * dL_dpower
                    dL_dopac[i] += G * dL_dalpha
