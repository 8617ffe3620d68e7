"""Per-view Monte-Carlo estimation of ambient occlusion and base colour maps.

Every estimator draws its samples from a counter-based stream keyed by
(seed, view, pixel, purpose), so results do not depend on how pixels are
split across threads.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .config import Config
from .denoise import denoise
from .envmap import EnvironmentMap
from .parallel import run_ranges
from .raster import ALPHA_MIN, rasterize
from .rt import _prepare
from .scene import MaterialMapSet

DELTA = 1e-4
RHO_LO, RHO_HI = -0.1, 1.1

PURPOSE_AO = 1
PURPOSE_DIFFUSE = 2
PURPOSE_SPECULAR = 3
PURPOSE_RENDER_DIFFUSE = 4
PURPOSE_RENDER_SPECULAR = 5


@dataclass(frozen=True)
class BRDFParams:
    roughness: float = 0.5
    f0: float = 0.04
    metallic: float = 0.0

    def __post_init__(self):
        if self.metallic != 0.0:
            raise ValueError("metallic is fixed at 0")
        if not 0.0 <= self.roughness <= 1.0:
            raise ValueError("roughness must lie in [0, 1]")


@dataclass(frozen=True)
class Sampler:
    """Deterministic per-pixel random streams."""

    seed: int = 0

    def streams(self, view, pixels, purpose):
        pix = np.ascontiguousarray(np.atleast_1d(pixels), dtype=np.int64)
        return K.make_streams(np.uint64(self.seed), np.uint64(view), pix, np.uint64(purpose))

    def uniforms(self, view, pixel, purpose, count):
        s = K.make_stream(np.uint64(self.seed), np.uint64(view), np.uint64(pixel), np.uint64(purpose))
        return np.array([K.rand01(s, k) for k in range(count)])


def _points(x, n):
    x = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    n = np.asarray(n, dtype=np.float64)
    n = np.ascontiguousarray(np.broadcast_to(n, x.shape))
    return x, n


def _streams(sampler, view, m, pixels, purpose):
    if pixels is None:
        pixels = np.arange(m)
    return sampler.streams(view, pixels, purpose)


def _env_data(env):
    return env.data if isinstance(env, EnvironmentMap) else np.ascontiguousarray(env, dtype=np.float64)


def estimate_ao(x, n, frame, bvh=None, spp=50, eps=0.02, seed=0, view=0, pixels=None, t_stop=1e-4,
                threads=None, purpose=PURPOSE_AO):
    """Cosine-weighted mean visibility over the hemisphere about ``n``, in [0, 1].

    Batched over the leading axis of ``x``; returns a scalar for one point.
    """
    single = np.asarray(x).ndim == 1
    x, n = _points(x, n)
    m = x.shape[0]
    streams = _streams(Sampler(seed), view, m, pixels, purpose)
    out = np.ones(m)
    scene, top, bottom = _prepare(frame, bvh)
    use_vis = len(frame) > 0
    run_ranges(K.ao_kernel, m, scene, top, bottom, x, n, float(eps), int(spp), streams, ALPHA_MIN, float(t_stop),
               use_vis, out, threads=threads, chunk=32)
    return float(out[0]) if single else out


def estimate_diffuse_residue(x, n, env, frame, bvh=None, spp=100, eps=0.02, seed=0, view=0, pixels=None, f0=0.04,
                             t_stop=1e-4, fresnel_weighted=True, use_visibility=True, threads=None,
                             purpose=PURPOSE_DIFFUSE):
    """Cosine-sampled estimate of (1/pi) int (1 - F) V L cos over the hemisphere; RGB."""
    single = np.asarray(x).ndim == 1
    x, n = _points(x, n)
    m = x.shape[0]
    streams = _streams(Sampler(seed), view, m, pixels, purpose)
    out = np.zeros((m, 3))
    scene, top, bottom = _prepare(frame, bvh)
    use_vis = use_visibility and len(frame) > 0
    run_ranges(K.diffuse_kernel, m, scene, top, bottom, _env_data(env), x, n, float(eps), int(spp), streams,
               float(f0), ALPHA_MIN, float(t_stop), use_vis, bool(fresnel_weighted), out, threads=threads, chunk=32)
    return out[0] if single else out


def estimate_specular(x, n, wo, roughness, env, frame, bvh=None, spp=100, eps=0.02, seed=0, view=0, pixels=None,
                      f0=0.04, t_stop=1e-4, use_visibility=True, threads=None, purpose=PURPOSE_SPECULAR):
    """GGX importance-sampled Cook-Torrance reflection of the shadowed environment; RGB.

    Points with n . wo <= 1e-4 return 0.
    """
    single = np.asarray(x).ndim == 1
    x, n = _points(x, n)
    m = x.shape[0]
    wo = np.ascontiguousarray(np.broadcast_to(np.asarray(wo, dtype=np.float64), (m, 3)))
    wo = wo / np.linalg.norm(wo, axis=1, keepdims=True)
    rough = np.ascontiguousarray(np.broadcast_to(np.asarray(roughness, dtype=np.float64), (m,)))
    streams = _streams(Sampler(seed), view, m, pixels, purpose)
    out = np.zeros((m, 3))
    scene, top, bottom = _prepare(frame, bvh)
    use_vis = use_visibility and len(frame) > 0
    run_ranges(K.specular_kernel, m, scene, top, bottom, _env_data(env), x, n, wo, rough, float(eps), int(spp),
               streams, float(f0), ALPHA_MIN, float(t_stop), use_vis, out, threads=threads, chunk=32)
    return out[0] if single else out


def solve_base_color(L_o, L_d, L_s, delta=DELTA):
    """Base colour from ``L_o = rho * L_d + L_s``; returns (rho clamped to [0, 1], valid)."""
    L_o = np.asarray(L_o, dtype=np.float64)
    L_d = np.asarray(L_d, dtype=np.float64)
    L_s = np.asarray(L_s, dtype=np.float64)
    raw = (L_o - L_s) / np.maximum(L_d, delta)
    valid = np.all(L_d >= delta, axis=-1) & np.all((raw >= RHO_LO) & (raw <= RHO_HI), axis=-1)
    return np.clip(raw, 0.0, 1.0), valid


def decompose_view(frame, cam, env, config=None, bvh=None, view_id=0, threads=None, gbuffer=None):
    """AO and base colour maps for one posed photograph.

    Foreground pixels of the rasterized GBuffer provide the shading point
    (ray-distance depth), the blended normal and the roughness. Without
    baked roughness the configured default is used.
    """
    config = config or Config()
    H, W = cam.height, cam.width
    maps = MaterialMapSet.empty(H, W)
    if len(frame) == 0:
        return maps
    gb = gbuffer if gbuffer is not None else rasterize(frame, cam, attachments=("pbr",), threads=threads)
    fg = gb.foreground.ravel() & (np.linalg.norm(gb.normal.reshape(-1, 3), axis=1) > 0.5)
    pix = np.flatnonzero(fg)
    if pix.size == 0:
        return maps
    o, d = cam.pixel_rays(pix)
    depth = gb.depth.ravel()[pix]
    x = o + d * depth[:, None]
    n = gb.normal.reshape(-1, 3)[pix]
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    wo = -d
    if frame.has_pbr and "roughness" in gb.attrs:
        rough = np.clip(gb.normalized("roughness").ravel()[pix], 0.0, 1.0)
    else:
        rough = np.full(pix.size, config.roughness_default)
    if cam.image is None:
        raise ValueError(f"camera {cam.name!r} has no photograph")
    L_o = config.exposure_k * np.asarray(cam.image, dtype=np.float64).reshape(-1, 3)[pix]

    if bvh is None:
        from .rt import build_bvh

        bvh = build_bvh(frame)
    common = dict(frame=frame, bvh=bvh, eps=config.ray_offset_eps, seed=config.seed, view=view_id, pixels=pix,
                  t_stop=config.early_stop_T, threads=threads)
    ao = estimate_ao(x, n, spp=config.spp_ao, **common)
    L_d = estimate_diffuse_residue(x, n, env, spp=config.spp_basecolor, f0=config.f0,
                                   fresnel_weighted=config.specular, **common)
    if config.specular:
        L_s = estimate_specular(x, n, wo, rough, env, spp=config.spp_basecolor, f0=config.f0, **common)
    else:
        L_s = np.zeros_like(L_d)
    rho, valid = solve_base_color(L_o, L_d, L_s)

    ao_map = np.zeros(H * W)
    ao_map[pix] = ao
    rho_map = np.zeros((H * W, 3))
    rho_map[pix] = rho
    valid_map = np.zeros(H * W, dtype=bool)
    valid_map[pix] = valid
    fg_map = np.zeros(H * W, dtype=bool)
    fg_map[pix] = True
    ao_map = ao_map.reshape(H, W)
    rho_map = rho_map.reshape(H, W, 3)
    valid_map = valid_map.reshape(H, W)
    fg_map = fg_map.reshape(H, W)
    normal = gb.normal.copy()
    normal[fg_map] /= np.linalg.norm(normal[fg_map], axis=-1, keepdims=True)
    depth_map = np.where(fg_map, gb.depth, 0.0)
    if config.denoise:
        ao_map = np.clip(denoise(ao_map, normal, depth_map, fg_map), 0.0, 1.0)
        rho_map = np.clip(denoise(rho_map, normal, depth_map, valid_map), 0.0, 1.0)
    return MaterialMapSet(ao_map, rho_map, depth_map, np.where(fg_map[..., None], normal, 0.0), valid_map)


def save_material_maps(maps, directory, prefix=""):
    """PFM per channel plus an 8-bit preview of AO | base colour."""
    import os

    from .color import linear_to_srgb
    from .io import write_pfm, write_png

    os.makedirs(directory, exist_ok=True)
    paths = {}
    for name, arr in (("ao", maps.ao), ("basecolor", maps.basecolor), ("depth", maps.depth),
                      ("normal", maps.normal), ("valid", maps.valid.astype(np.float64))):
        p = os.path.join(directory, f"{prefix}{name}.pfm")
        write_pfm(p, arr)
        paths[name] = p
    preview = np.concatenate([np.repeat(maps.ao[..., None], 3, axis=2), maps.basecolor], axis=1)
    p = os.path.join(directory, f"{prefix}preview.png")
    write_png(p, np.round(linear_to_srgb(preview) * 255).astype(np.uint8))
    paths["preview"] = p
    return paths


def load_material_maps(directory, prefix=""):
    import os

    from .io import read_pfm

    def rd(name):
        return read_pfm(os.path.join(directory, f"{prefix}{name}.pfm")).astype(np.float64)

    return MaterialMapSet(rd("ao"), rd("basecolor"), rd("depth"), rd("normal"), rd("valid") > 0.5)
