"""Image-quality metrics: PSNR and windowed SSIM with an analytic gradient.

SSIM uses the canonical settings: 11x11 Gaussian window with sigma 1.5,
C1 = 0.01^2, C2 = 0.03^2, unit dynamic range, per-channel evaluation with the
half-window border cropped before averaging. D-SSIM is (1 - SSIM) / 2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

PSNR_CAP = 99.0
SSIM_WIN = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0,1] images, capped at 99."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse <= 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-0.5 * (x / sigma) ** 2)
    return w / w.sum()


_W1D = _window()


def _filt(img: np.ndarray) -> np.ndarray:
    # Filters the trailing (H, W) axes of a channels-first array. Boundary
    # mode is irrelevant: the half-window border is cropped (forward) or
    # zeroed (backward) before use. Constant-zero keeps the op self-adjoint.
    out = correlate1d(img, _W1D, axis=-2, mode="constant", cval=0.0)
    return correlate1d(out, _W1D, axis=-1, mode="constant", cval=0.0)


def _as_chw(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img[None]
    if img.ndim == 3:
        return np.moveaxis(img, 2, 0)
    raise ValueError(f"expected (H,W) or (H,W,C) image, got shape {img.shape}")


def _ssim_maps(a: np.ndarray, b: np.ndarray):
    """Per-channel SSIM map plus intermediates, channels-first float64."""
    mu_a, mu_b = _filt(a), _filt(b)
    var_a = _filt(a * a) - mu_a * mu_a
    var_b = _filt(b * b) - mu_b * mu_b
    cov = _filt(a * b) - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    b2 = var_a + var_b + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    return s, (mu_a, mu_b, a1, a2, b1, b2)


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean SSIM over the border-cropped region, averaged across channels."""
    ca, cb = _as_chw(a), _as_chw(b)
    if ca.shape != cb.shape:
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    h, w = ca.shape[1:]
    if h < SSIM_WIN or w < SSIM_WIN:
        raise ValueError(f"image must be at least {SSIM_WIN}x{SSIM_WIN}, got {h}x{w}")
    pad = (SSIM_WIN - 1) // 2
    s, _ = _ssim_maps(ca, cb)
    return float(np.mean(s[:, pad:-pad, pad:-pad]))


def dssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural dissimilarity (1 - SSIM) / 2, in [0, 1]."""
    return (1.0 - ssim(a, b)) / 2.0


def ssim_with_grad(a: np.ndarray, b: np.ndarray):
    """Mean SSIM and its gradient with respect to ``a``.

    The gradient has a's original shape and dtype float64. ``b`` is treated
    as a constant (the ground-truth image in the loss).
    """
    orig_ndim = np.asarray(a).ndim
    ca, cb = _as_chw(a), _as_chw(b)
    if ca.shape != cb.shape:
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")
    h, w = ca.shape[1:]
    if h < SSIM_WIN or w < SSIM_WIN:
        raise ValueError(f"image must be at least {SSIM_WIN}x{SSIM_WIN}, got {h}x{w}")
    pad = (SSIM_WIN - 1) // 2
    s, (mu_a, mu_b, a1, a2, b1, b2) = _ssim_maps(ca, cb)
    valid = np.zeros_like(s)
    valid[:, pad:-pad, pad:-pad] = 1.0
    n_valid = valid.sum()
    mssim = float((s * valid).sum() / n_valid)

    # Upstream weight of each valid pixel in the mean.
    g = valid / n_valid
    ds_da1 = a2 / (b1 * b2)
    ds_da2 = a1 / (b1 * b2)
    ds_db1 = -s / b1
    ds_db2 = -s / b2
    # Three filtered quantities depend on a: mu_a, E[a^2], E[ab].
    g_mu = 2.0 * g * (mu_b * ds_da1 + mu_a * ds_db1 - mu_a * ds_db2 - mu_b * ds_da2)
    g_sq = g * ds_db2
    g_ab = 2.0 * g * ds_da2
    grad = _filt(g_mu) + 2.0 * ca * _filt(g_sq) + cb * _filt(g_ab)
    if orig_ndim == 2:
        return mssim, grad[0]
    return mssim, np.moveaxis(grad, 0, 2)


@dataclass
class MetricReport:
    """Per-frame PSNR/SSIM values with aggregate statistics."""

    frame_names: list = field(default_factory=list)
    psnr_values: list = field(default_factory=list)
    ssim_values: list = field(default_factory=list)

    def add(self, name: str, psnr_db: float, ssim_val: float) -> None:
        self.frame_names.append(str(name))
        self.psnr_values.append(float(psnr_db))
        self.ssim_values.append(float(ssim_val))

    def __len__(self) -> int:
        return len(self.frame_names)

    def aggregate(self) -> dict:
        p = np.asarray(self.psnr_values, dtype=np.float64)
        s = np.asarray(self.ssim_values, dtype=np.float64)
        if len(p) == 0:
            stats = {"mean": None, "std": None, "min": None, "max": None}
            return {"psnr": dict(stats), "ssim": dict(stats), "lpips": None, "n_frames": 0}
        return {
            "psnr": {
                "mean": float(p.mean()),
                "std": float(p.std()),
                "min": float(p.min()),
                "max": float(p.max()),
            },
            "ssim": {
                "mean": float(s.mean()),
                "std": float(s.std()),
                "min": float(s.min()),
                "max": float(s.max()),
            },
            "lpips": None,
            "n_frames": len(p),
        }

    def rows(self):
        """Per-frame rows for CSV export: (frame, psnr, ssim)."""
        return list(zip(self.frame_names, self.psnr_values, self.ssim_values))
