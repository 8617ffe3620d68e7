"""Equirectangular HDR environment maps.

Convention: +Y is up. Rows map the polar angle theta in [0, pi] measured
from +Y (row 0 is the zenith); columns map phi = atan2(z, x) in [-pi, pi).
"""

from dataclasses import dataclass

import numpy as np

from .scene import SceneError


def direction_to_uv(dirs):
    """Continuous texel coordinates (u in [0, W) units of 1, v in [0, 1]) for unit directions."""
    d = np.asarray(dirs, dtype=np.float64)
    d = d / np.maximum(np.linalg.norm(d, axis=-1, keepdims=True), 1e-300)
    theta = np.arccos(np.clip(d[..., 1], -1.0, 1.0))
    phi = np.arctan2(d[..., 2], d[..., 0])
    return (phi + np.pi) / (2 * np.pi), theta / np.pi


def uv_to_direction(u, v):
    phi = np.asarray(u, dtype=np.float64) * 2 * np.pi - np.pi
    theta = np.asarray(v, dtype=np.float64) * np.pi
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), np.cos(theta), st * np.sin(phi)], axis=-1)


def texel_directions(height, width):
    """Unit directions of texel centres, shape (H, W, 3)."""
    v = (np.arange(height) + 0.5) / height
    u = (np.arange(width) + 0.5) / width
    uu, vv = np.meshgrid(u, v)
    return uv_to_direction(uu, vv)


def texel_solid_angles(height, width):
    v0 = np.arange(height) / height * np.pi
    v1 = (np.arange(height) + 1) / height * np.pi
    band = (np.cos(v0) - np.cos(v1)) * (2 * np.pi / width)
    return np.repeat(band[:, None], width, axis=1)


def bilinear_lookup(image, u, v):
    """Bilinear sample of (H, W, C) ``image`` at normalised coords; wraps in u, clamps in v."""
    H, W = image.shape[:2]
    x = np.asarray(u) * W - 0.5
    y = np.clip(np.asarray(v) * H - 0.5, 0.0, H - 1.0)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = (x - x0)[..., None]
    fy = (y - y0)[..., None]
    x0 = x0.astype(np.int64) % W
    x1 = (x0 + 1) % W
    y0 = y0.astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    top = image[y0, x0] * (1 - fx) + image[y0, x1] * fx
    bot = image[y1, x0] * (1 - fx) + image[y1, x1] * fx
    return top * (1 - fy) + bot * fy


@dataclass(eq=False)
class EnvironmentMap:
    """Linear HDR radiance on an equirectangular grid, shape (H, W, 3)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise SceneError("environment map must be (H, W, 3)")
        if not np.isfinite(self.data).all() or (self.data < 0).any():
            raise SceneError("environment map texels must be finite and >= 0")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    def query(self, dirs):
        """Radiance along directions (..., 3); directions are renormalised."""
        u, v = direction_to_uv(dirs)
        return np.maximum(bilinear_lookup(self.data, u, v), 0.0)

    def rotated(self, dphi):
        """Map rotated about +Y by ``dphi`` radians (must be a whole number of texels)."""
        shift = dphi / (2 * np.pi) * self.width
        k = int(round(shift))
        if abs(shift - k) > 1e-9:
            raise ValueError("rotation must be a multiple of the texel width")
        return EnvironmentMap(np.roll(self.data, k, axis=1))

    def downsample(self, height, width):
        """Box-filtered copy at a lower resolution (integer factors)."""
        H, W = self.data.shape[:2]
        if H % height or W % width:
            return EnvironmentMap(_resample(self.data, height, width))
        fh, fw = H // height, W // width
        return EnvironmentMap(self.data.reshape(height, fh, width, fw, 3).mean(axis=(1, 3)))

    def max_radiance(self):
        return float(self.data.max()) if self.data.size else 0.0

    @classmethod
    def constant(cls, value, height=16, width=32):
        return cls(np.broadcast_to(np.asarray(value, dtype=np.float64), (height, width, 3)).copy())

    @classmethod
    def from_function(cls, fn, height=64, width=128):
        """Tabulate ``fn(dirs) -> (..., 3)`` at texel centres."""
        return cls(np.asarray(fn(texel_directions(height, width)), dtype=np.float64))


def _resample(data, height, width):
    u = (np.arange(width) + 0.5) / width
    v = (np.arange(height) + 0.5) / height
    uu, vv = np.meshgrid(u, v)
    return bilinear_lookup(data, uu, vv)


def query_env(env, direction):
    return env.query(direction)
