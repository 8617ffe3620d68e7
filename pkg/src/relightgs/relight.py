"""Relighting: split-sum deferred shading and a ray-traced offline path.

Both paths shade the same surface model. The diffuse lobe is Lambertian
weighted by (1 - F) for the Schlick Fresnel of the incident direction, and
the specular lobe is GGX Cook-Torrance with F0 = 0.04. With the specular
lobe disabled the diffuse lobe is plain Lambertian, so a constant
environment of radiance L lights a white surface to exactly L.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import map_coordinates

from .color import linear_to_srgb
from .config import Config
from .decompose import PURPOSE_RENDER_DIFFUSE, PURPOSE_RENDER_SPECULAR, estimate_diffuse_residue, estimate_specular
from .envmap import EnvironmentMap, bilinear_lookup, direction_to_uv, texel_directions
from .raster import rasterize
from .rt import build_bvh, trace_surfaces
from .scene import SceneError

ROUGHNESS_LEVELS = (0.0, 0.25, 0.5, 0.75, 1.0)


@dataclass(eq=False)
class PrefilteredEnv:
    """Lookup tables for image-based lighting.

    ``irradiance`` is the cosine-convolved radiance divided by pi (so a
    constant map of L gives L); ``irradiance_fresnel`` additionally weights
    each direction by 1 - F. ``specular`` holds one GGX-convolved map per
    entry of ``ROUGHNESS_LEVELS`` and ``brdf`` is the (n.v, roughness) grid
    of split-sum scale and bias.
    """

    source: EnvironmentMap
    irradiance: np.ndarray
    irradiance_fresnel: np.ndarray
    specular: list
    brdf: np.ndarray
    f0: float = 0.04

    def diffuse(self, normals, fresnel=True):
        m = self.irradiance_fresnel if fresnel else self.irradiance
        u, v = direction_to_uv(normals)
        return np.maximum(bilinear_lookup(m, u, v), 0.0)

    def specular_radiance(self, dirs, roughness):
        u, v = direction_to_uv(dirs)
        levels = np.stack([bilinear_lookup(m, u, v) for m in self.specular])  # (L, ..., 3)
        x = np.clip(np.asarray(roughness, dtype=np.float64), 0.0, 1.0) * (len(ROUGHNESS_LEVELS) - 1)
        i0 = np.minimum(np.floor(x).astype(np.int64), len(ROUGHNESS_LEVELS) - 2)
        f = (x - i0)[..., None]
        a = np.take_along_axis(levels, i0[None, ..., None], axis=0)[0]
        b = np.take_along_axis(levels, (i0 + 1)[None, ..., None], axis=0)[0]
        return np.maximum(a * (1 - f) + b * f, 0.0)

    def brdf_lookup(self, nv, roughness):
        """Split-sum (scale, bias) at the given n.v and roughness, bilinear in the table."""
        n_nv, n_r = self.brdf.shape[:2]
        ci = np.clip(np.asarray(nv, dtype=np.float64), 0.0, 1.0) * n_nv - 0.5
        cj = np.clip(np.asarray(roughness, dtype=np.float64), 0.0, 1.0) * (n_r - 1)
        coords = np.stack([ci.ravel(), cj.ravel()])
        out = [map_coordinates(self.brdf[..., c], coords, order=1, mode="nearest") for c in range(2)]
        return out[0].reshape(ci.shape), out[1].reshape(ci.shape)


def _phi_tangents(dirs):
    """Unit tangents along increasing azimuth; they rotate with the map about +Y."""
    phi = np.arctan2(dirs[..., 2], dirs[..., 0])
    return np.stack([-np.sin(phi), np.zeros_like(phi), np.cos(phi)], axis=-1)


def _convolve(env, height, width, local, weight_fn, chunk=64):
    """Per-texel weighted average of env radiance over a fixed local sample set.

    Samples are expressed in a texel frame (azimuthal tangent, bitangent,
    centre direction), so rotating the map by whole texels about +Y rotates
    the result by the same amount.
    """
    dirs = texel_directions(height, width).reshape(-1, 3)
    tang = _phi_tangents(dirs)
    bit = np.cross(dirs, tang)
    w = weight_fn(local)
    out = np.zeros((dirs.shape[0], 3))
    for s in range(0, dirs.shape[0], chunk):
        e = min(s + chunk, dirs.shape[0])
        world = (local[None, :, 0, None] * tang[s:e, None, :] + local[None, :, 1, None] * bit[s:e, None, :]
                 + local[None, :, 2, None] * dirs[s:e, None, :])
        u, v = direction_to_uv(world)
        L = bilinear_lookup(env.data, u, v)
        out[s:e] = (L * w[None, :, None]).sum(axis=1) / max(w.sum(), 1e-300)
    return out.reshape(height, width, 3)


def _cosine_local(u1, u2):
    r = np.sqrt(u1)
    return np.stack([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2), np.sqrt(1 - u1)], axis=1)


def _ggx_half_local(alpha, u1, u2):
    tan2 = alpha * alpha * u1 / np.maximum(1 - u1, 1e-300)
    ct = 1.0 / np.sqrt(1 + tan2)
    st = np.sqrt(np.maximum(0.0, 1 - ct * ct))
    return np.stack([st * np.cos(2 * np.pi * u2), st * np.sin(2 * np.pi * u2), ct], axis=1)


def _schlick(c, f0):
    return f0 + (1 - f0) * np.clip(1 - c, 0, 1) ** 5


def brdf_table(n_nv=32, n_rough=32, samples=1024, seed=0):
    """Split-sum table: specular albedo = F0 * scale + bias."""
    rng = np.random.default_rng(seed)
    u1, u2 = rng.random(samples), rng.random(samples)
    out = np.zeros((n_nv, n_rough, 2))
    for i in range(n_nv):
        nv = (i + 0.5) / n_nv
        V = np.array([np.sqrt(1 - nv * nv), 0.0, nv])
        for j in range(n_rough):
            alpha = max((j / (n_rough - 1)) ** 2, 1e-4)
            H = _ggx_half_local(alpha, u1, u2)
            vh = H @ V
            L = 2 * vh[:, None] * H - V
            nl, nh = L[:, 2], H[:, 2]
            ok = (nl > 0) & (vh > 0)
            k = alpha / 2
            g = (nl / (nl * (1 - k) + k)) * (nv / (nv * (1 - k) + k))
            gv = np.where(ok, g * vh / (nh * nv), 0.0)
            fc = np.clip(1 - vh, 0, 1) ** 5
            out[i, j, 0] = np.mean((1 - fc) * gv)
            out[i, j, 1] = np.mean(fc * gv)
    return out


def prefilter_env(env, config=None, irradiance_size=(16, 32), specular_size=(32, 64), samples=4096,
                  specular_samples=1024, seed=0):
    """Build diffuse, Fresnel-weighted diffuse, GGX chain and BRDF table lookups."""
    config = config or Config()
    rng = np.random.default_rng(seed)
    f0 = config.f0
    u1, u2 = rng.random(samples), rng.random(samples)
    cos_local = _cosine_local(u1, u2)
    h, w = irradiance_size
    irr = _convolve(env, h, w, cos_local, lambda l: np.ones(len(l)))
    irr_f = _convolve(env, h, w, cos_local, lambda l: 1 - _schlick(l[:, 2], f0))
    irr_f *= np.mean(1 - _schlick(cos_local[:, 2], f0))  # undo the weight normalisation
    sh, sw = specular_size
    spec = [env.downsample(sh, sw).data]
    v1, v2 = rng.random(specular_samples), rng.random(specular_samples)
    for r in ROUGHNESS_LEVELS[1:]:
        H = _ggx_half_local(max(r * r, 1e-4), v1, v2)
        L = 2 * H[:, 2:3] * H - np.array([0.0, 0.0, 1.0])
        spec.append(_convolve(env, sh, sw, L, lambda l: np.maximum(l[:, 2], 0.0)))
    return PrefilteredEnv(env, irr, irr_f, spec, brdf_table(seed=seed), f0)


# --------------------------------------------------------------------------- output

@dataclass(eq=False)
class Rendering:
    linear: np.ndarray      # (H, W, 3) radiance before exposure
    image: np.ndarray       # (H, W, 3) uint8 sRGB
    foreground: np.ndarray  # (H, W) bool


def tone_map(image, exposure=1.0):
    """Scale by exposure, clamp to [0, 1] and encode as 8-bit sRGB."""
    if exposure <= 0:
        raise ValueError("exposure must be > 0")
    return np.round(linear_to_srgb(np.asarray(image, dtype=np.float64) * exposure) * 255.0).astype(np.uint8)


def _check_relightable(frame, strict):
    if not frame.has_pbr:
        raise SceneError("frame has no material attributes")
    if strict and frame.has_sh:
        raise SceneError("frame still carries view-dependent colour; reparameterize it first")


def render_deferred(frame, cam, prefiltered, exposure=1.0, config=None, strict=True, threads=None):
    """Rasterize material buffers and shade them with split-sum lighting."""
    config = config or Config()
    _check_relightable(frame, strict)
    H, W = cam.height, cam.width
    _, dirs = cam.pixel_rays()
    out = prefiltered.source.query(dirs).reshape(H, W, 3)
    fg = np.zeros((H, W), dtype=bool)
    if len(frame):
        gb = rasterize(frame, cam, attachments=("pbr",), threads=threads)
        fg = gb.foreground & (np.linalg.norm(gb.normal, axis=-1) > 0.5)
        n = gb.normal[fg]
        n = n / np.linalg.norm(n, axis=1, keepdims=True)
        rho = np.clip(gb.normalized("base_color")[fg], 0, 1)
        ao = np.clip(gb.normalized("ao")[fg], 0, 1)
        rough = np.clip(gb.normalized("roughness")[fg], 0, 1)
        col = rho * ao[:, None] * prefiltered.diffuse(n, fresnel=config.specular)
        if config.specular:
            wo = -dirs.reshape(H, W, 3)[fg]
            nv = np.sum(n * wo, axis=1)
            refl = 2 * nv[:, None] * n - wo
            a, b = prefiltered.brdf_lookup(nv, rough)
            spec = prefiltered.specular_radiance(refl, rough) * (prefiltered.f0 * a + b)[:, None]
            col = col + np.where((nv > 1e-4)[:, None], spec, 0.0)
        out[fg] = col
    return Rendering(out, tone_map(out, exposure), fg)


def render_offline(frame, bvh, cam, env, spp=64, exposure=1.0, config=None, seed=None, view=0, strict=True,
                   use_visibility=True, threads=None):
    """Ray-traced direct lighting with shadowed diffuse and GGX samples at the primary hit."""
    config = config or Config()
    if config.indirect_bounce:
        raise NotImplementedError("the indirect bounce is reserved and not implemented")
    _check_relightable(frame, strict)
    seed = config.seed if seed is None else seed
    H, W = cam.height, cam.width
    o, dirs = cam.pixel_rays()
    out = env.query(dirs).reshape(-1, 3)
    fgm = np.zeros(H * W, dtype=bool)
    if len(frame):
        bvh = bvh if bvh is not None else build_bvh(frame)
        t, nrm, attr, alpha = trace_surfaces(frame, bvh, o, dirs, threads=threads)
        fgm = (alpha >= 0.5) & (np.linalg.norm(nrm, axis=1) > 0.5)
        pix = np.flatnonzero(fgm)
        if pix.size:
            a = attr[pix] / alpha[pix, None]
            rho = np.clip(a[:, :3], 0, 1)
            rough = np.clip(a[:, 3], 0, 1)
            n = nrm[pix] / np.linalg.norm(nrm[pix], axis=1, keepdims=True)
            x = o[pix] + dirs[pix] * t[pix, None]
            common = dict(frame=frame, bvh=bvh, spp=spp, eps=config.ray_offset_eps, seed=seed, view=view,
                          pixels=pix, f0=config.f0, t_stop=config.early_stop_T, use_visibility=use_visibility,
                          threads=threads)
            col = rho * estimate_diffuse_residue(x, n, env, fresnel_weighted=config.specular,
                                                 purpose=PURPOSE_RENDER_DIFFUSE, **common)
            if config.specular:
                col = col + estimate_specular(x, n, -dirs[pix], rough, env, purpose=PURPOSE_RENDER_SPECULAR,
                                              **common)
            out[pix] = col
    out = out.reshape(H, W, 3)
    fg = fgm.reshape(H, W)
    return Rendering(out, tone_map(out, exposure), fg)


def save_rendering(rendering, path_png, path_pfm=None):
    from .io import write_pfm, write_png

    write_png(path_png, rendering.image)
    if path_pfm:
        write_pfm(path_pfm, rendering.linear)
