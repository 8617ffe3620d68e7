"""Image metrics: PSNR and Gaussian-window SSIM."""

import numpy as np
from scipy.ndimage import gaussian_filter

PSNR_CAP = 99.0


def mse(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; identical inputs give the 99 dB cap."""
    m = mse(a, b)
    if m <= 0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak * peak / m), PSNR_CAP))


def format_psnr(value):
    return "inf (capped 99 dB)" if value >= PSNR_CAP else f"{value:.2f} dB"


def ssim(a, b, peak=1.0, sigma=1.5, window=11, k1=0.01, k2=0.03):
    """Mean SSIM with a Gaussian window (sample covariance), averaged over channels.

    Statistics are taken only where the full window fits inside the image.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must have the same shape")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    truncate = ((window - 1) / 2) / sigma
    r = (window - 1) // 2
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]

        def filt(z):
            return gaussian_filter(z, sigma, truncate=truncate, mode="reflect")

        n = window * window
        cov_norm = n / (n - 1)
        ux, uy = filt(x), filt(y)
        vx = cov_norm * (filt(x * x) - ux * ux)
        vy = cov_norm * (filt(y * y) - uy * uy)
        vxy = cov_norm * (filt(x * y) - ux * uy)
        s = ((2 * ux * uy + c1) * (2 * vxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        vals.append(s[r:s.shape[0] - r, r:s.shape[1] - r].mean())
    return float(np.mean(vals))
