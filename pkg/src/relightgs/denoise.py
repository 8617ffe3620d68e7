"""Joint bilateral filtering of material maps guided by normals and depth."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DenoiseParams:
    sigma_spatial: float = 2.0
    sigma_range: float = 0.1
    normal_scale: float = 0.1
    depth_rel: float = 0.02
    radius: int = 6


def _filter(img, nrm, dep, valid, params, range_guide=None):
    H, W, C = img.shape
    r = int(params.radius)
    pad = ((r, r), (r, r))
    img_p = np.pad(img, pad + ((0, 0),))
    nrm_p = np.pad(nrm, pad + ((0, 0),))
    dep_p = np.pad(dep, pad)
    val_p = np.pad(valid, pad)
    g_p = None if range_guide is None else np.pad(range_guide, pad + ((0, 0),))
    acc = np.zeros_like(img)
    wsum = np.zeros((H, W))
    sd = np.maximum(params.depth_rel * dep, 1e-12)
    inv_2sr2 = 1.0 / (2.0 * params.sigma_range ** 2)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            ws = np.exp(-(dx * dx + dy * dy) / (2.0 * params.sigma_spatial ** 2))
            sl = (slice(r + dy, r + dy + H), slice(r + dx, r + dx + W))
            q = img_p[sl]
            vq = val_p[sl]
            w = ws * np.exp(-(1.0 - (nrm_p[sl] * nrm).sum(axis=-1)) / params.normal_scale)
            dd = dep_p[sl] - dep
            w = w * np.exp(-dd * dd / (2.0 * sd * sd))
            if g_p is not None:
                w = w * np.exp(-((g_p[sl] - range_guide) ** 2).sum(axis=-1) * inv_2sr2)
            w = np.where(vq, w, 0.0)
            acc += w[..., None] * q
            wsum += w
    out = np.where((valid & (wsum > 0))[..., None], acc / np.where(wsum > 0, wsum, 1.0)[..., None], 0.0)
    return np.where(valid[..., None], out, 0.0)


def denoise(image, guide_normal, guide_depth, valid=None, params=DenoiseParams()):
    """Filter a (H, W) or (H, W, C) map.

    Weights are the product of spatial, normal, relative-depth and range
    terms. The range term compares values of a pilot estimate (the same
    filter without the range term) rather than the raw noisy map, so noise
    at the scale of the range sigma is still averaged away. Invalid pixels
    neither contribute nor receive output (they are returned as zero). The
    result is a convex combination of valid inputs, so value ranges are
    preserved.
    """
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    nrm = np.asarray(guide_normal, dtype=np.float64)
    dep = np.asarray(guide_depth, dtype=np.float64)
    if valid is None:
        valid = dep > 0
    valid = np.asarray(valid, dtype=bool)
    pilot = _filter(img, nrm, dep, valid, params)
    out = _filter(img, nrm, dep, valid, params, range_guide=pilot)
    return out[..., 0] if squeeze else out
