"""Colour transfer functions and spherical-harmonics evaluation."""

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)

SH_COEFFS = 16  # degree 3


def srgb_to_linear(image):
    x = np.asarray(image, dtype=np.float64)
    return np.where(x <= 0.04045, x / 12.92, ((x + 0.055) / 1.055) ** 2.4)


def linear_to_srgb(image):
    """Encode linear values with the sRGB curve; input is clamped to [0, 1] first."""
    x = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, x * 12.92, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def luminance(rgb):
    rgb = np.asarray(rgb, dtype=np.float64)
    return rgb[..., 0] * 0.2126 + rgb[..., 1] * 0.7152 + rgb[..., 2] * 0.0722


def sh_basis(dirs):
    """Real SH basis up to degree 3 for unit directions, shape (..., 16)."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out = np.empty(d.shape[:-1] + (SH_COEFFS,))
    out[..., 0] = SH_C0
    out[..., 1] = -SH_C1 * y
    out[..., 2] = SH_C1 * z
    out[..., 3] = -SH_C1 * x
    out[..., 4] = SH_C2[0] * xy
    out[..., 5] = SH_C2[1] * yz
    out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = SH_C2[3] * xz
    out[..., 8] = SH_C2[4] * (xx - yy)
    out[..., 9] = SH_C3[0] * y * (3 * xx - yy)
    out[..., 10] = SH_C3[1] * xy * z
    out[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    out[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    out[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    out[..., 14] = SH_C3[5] * z * (xx - yy)
    out[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def eval_sh(sh, dirs):
    """Evaluate per-Gaussian SH colour.

    ``sh`` has shape (N, 16, 3) and ``dirs`` (N, 3) holds unit viewing
    directions (camera centre towards the Gaussian). Follows the usual
    splatting convention of a +0.5 offset; results are clamped at zero.
    """
    basis = sh_basis(dirs)
    rgb = np.einsum("nk,nkc->nc", basis, np.asarray(sh, dtype=np.float64)) + 0.5
    return np.maximum(rgb, 0.0)


def sh_dc_color(sh):
    """View-independent colour of the DC band, clamped to [0, 1]."""
    return np.clip(SH_C0 * np.asarray(sh, dtype=np.float64)[:, 0, :] + 0.5, 0.0, 1.0)


def rgb_to_sh_dc(rgb):
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0
