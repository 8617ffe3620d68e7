"""Software rasterizer for Gaussians under the max-response intersection model.

Each pixel ray is tested against the Gaussians binned to its tile; a
Gaussian's hit is the point of maximum kernel response along the ray. Hits
are sorted per pixel by ray distance (ties by index) and composited front to
back, so the rasterizer and the ray tracer share one set of semantics.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .parallel import run_ranges
from .scene import quat_to_rotmat

ALPHA_MIN = 1.0 / 255.0
T_NEAR = 0.01
BG_THRESHOLD = 0.5
T_STOP = 1e-4
TILE = 16
PROXY_SIGMA = 3.0
# circumradius of an icosahedron whose inscribed sphere is the unit sphere, with a small margin
ICO_INFLATE = 1.0001 / 0.7946544722917661


def gaussian_geometry(quats, scales, proxy_sigma=PROXY_SIGMA):
    """Precision matrices, smallest-axis normals and world-to-proxy maps."""
    R = quat_to_rotmat(np.asarray(quats, dtype=np.float64).reshape(-1, 4))
    s = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    P = np.einsum("nij,nj,nkj->nik", R, 1.0 / s ** 2, R)
    k = np.argmin(s, axis=1)
    nax = R[np.arange(len(s)), :, k]
    M = np.einsum("nj,nkj->njk", 1.0 / (proxy_sigma * s), R)  # diag(1/(k s)) R^T
    return np.ascontiguousarray(P), np.ascontiguousarray(nax), np.ascontiguousarray(M)


def pack_scene(frame, proxy_sigma=PROXY_SIGMA):
    """Kernel-ready tuple (means, precisions, opacities, normal axes, proxy maps)."""
    key = ("packed", proxy_sigma)
    if key not in frame._cache:
        P, nax, M = gaussian_geometry(frame.quats, frame.scales, proxy_sigma)
        frame._cache[key] = (np.ascontiguousarray(frame.means, dtype=np.float64), P,
                             np.ascontiguousarray(frame.opacities, dtype=np.float64), nax, M)
    return frame._cache[key]


def ray_gaussian_max_response(g, origin, direction):
    """Ray distance of maximum response of Gaussian ``g`` and the response there.

    The response is not clipped here; callers apply the 3-sigma cut-off.
    """
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    P = g.precision()
    Pd = P @ d
    t = float(Pd @ (np.asarray(g.mean, dtype=np.float64) - o)) / float(d @ Pd)
    delta = o + t * d - g.mean
    return t, float(np.exp(-0.5 * delta @ P @ delta))


def max_response_batch(means, precisions, origin, direction):
    """Vectorised max-response over many Gaussians for one ray: (t*, squared Mahalanobis)."""
    d = np.asarray(direction, dtype=np.float64)
    Pd = precisions @ d
    t = np.einsum("ni,ni->n", Pd, means - origin) / (Pd @ d)
    delta = origin + t[:, None] * d - means
    q = np.einsum("ni,nij,nj->n", delta, precisions, delta)
    return t, np.maximum(q, 0.0)


@dataclass(eq=False)
class GBuffer:
    """Per-pixel render buffers.

    ``attrs`` maps attribute names to raw blended maps (sum of w_i a_i);
    use :meth:`normalized` for per-surface values. ``contrib`` optionally
    holds each pixel's contributions as CSR (ptr, gaussian index, weight, t).
    """

    width: int
    height: int
    color: np.ndarray
    depth: np.ndarray
    normal: np.ndarray
    normal_depth: np.ndarray
    alpha: np.ndarray
    attrs: dict
    count: np.ndarray
    contrib: tuple | None = None
    bg_threshold: float = BG_THRESHOLD

    @property
    def foreground(self):
        return self.alpha >= self.bg_threshold

    def normalized(self, name):
        m = self.attrs[name]
        a = self.alpha.reshape(self.alpha.shape + (1,) * (m.ndim - 2))
        out = np.where(a > 0, m / np.where(a > 0, a, 1.0), 0.0)
        fg = self.foreground.reshape(a.shape)
        return np.where(fg, out, 0.0)

    def export(self, directory, prefix=""):
        import os

        from .io import write_pfm

        os.makedirs(directory, exist_ok=True)
        write_pfm(os.path.join(directory, prefix + "color.pfm"), self.color)
        write_pfm(os.path.join(directory, prefix + "depth.pfm"), self.depth)
        write_pfm(os.path.join(directory, prefix + "normal.pfm"), self.normal)
        write_pfm(os.path.join(directory, prefix + "normal_depth.pfm"), self.normal_depth)
        write_pfm(os.path.join(directory, prefix + "alpha.pfm"), self.alpha)
        for name, m in self.attrs.items():
            write_pfm(os.path.join(directory, prefix + name + ".pfm"), m)


def projected_bounds(means, covariances, cam):
    """Pixel-space bounds (u0, v0, u1, v1) of each Gaussian's 3-sigma box.

    Gaussians straddling the camera plane cover the whole image; Gaussians
    entirely behind it get an empty box.
    """
    n = means.shape[0]
    half = PROXY_SIGMA * np.sqrt(np.maximum(np.einsum("nii->ni", covariances), 0.0))
    signs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
    corners = means[:, None, :] + signs[None] * half[:, None, :]
    uv, z = cam.project(corners.reshape(-1, 3))
    uv = uv.reshape(n, 8, 2)
    z = z.reshape(n, 8)
    with np.errstate(invalid="ignore"):
        box = np.concatenate([uv.min(axis=1), uv.max(axis=1)], axis=1)
    straddle = z.min(axis=1) <= 1e-6
    behind = z.max(axis=1) <= 1e-6
    box[straddle] = [-np.inf, -np.inf, np.inf, np.inf]
    box[behind] = [1.0, 1.0, -1.0, -1.0]
    return box


def pixel_ranges(box, width, height):
    """Inclusive pixel-index ranges whose centres fall inside each box."""
    with np.errstate(invalid="ignore"):
        x0 = np.ceil(np.clip(box[:, 0], -1, width + 1) - 0.5).astype(np.int64)
        y0 = np.ceil(np.clip(box[:, 1], -1, height + 1) - 0.5).astype(np.int64)
        x1 = np.floor(np.clip(box[:, 2], -1, width + 1) - 0.5).astype(np.int64)
        y1 = np.floor(np.clip(box[:, 3], -1, height + 1) - 0.5).astype(np.int64)
    return np.maximum(x0, 0), np.maximum(y0, 0), np.minimum(x1, width - 1), np.minimum(y1, height - 1)


def bin_tiles(frame, cam, tile=TILE):
    """CSR lists of candidate Gaussians per screen tile (ascending index)."""
    tw = (cam.width + tile - 1) // tile
    th = (cam.height + tile - 1) // tile
    n = len(frame)
    if n == 0:
        return np.zeros(tw * th + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), tw, th
    box = projected_bounds(frame.means, frame.covariances(), cam)
    x0, y0, x1, y1 = pixel_ranges(box, cam.width, cam.height)
    ok = (x1 >= x0) & (y1 >= y0)
    tx0, ty0, tx1, ty1 = x0 // tile, y0 // tile, x1 // tile, y1 // tile
    ids, tiles = [], []
    for i in np.flatnonzero(ok):
        xs = np.arange(tx0[i], tx1[i] + 1)
        ys = np.arange(ty0[i], ty1[i] + 1)
        t = (ys[:, None] * tw + xs[None, :]).ravel()
        tiles.append(t)
        ids.append(np.full(t.size, i, dtype=np.int64))
    if not tiles:
        return np.zeros(tw * th + 1, dtype=np.int64), np.zeros(0, dtype=np.int64), tw, th
    tiles = np.concatenate(tiles)
    ids = np.concatenate(ids)
    order = np.lexsort((ids, tiles))
    tiles, ids = tiles[order], ids[order]
    ptr = np.zeros(tw * th + 1, dtype=np.int64)
    np.add.at(ptr, tiles + 1, 1)
    return np.cumsum(ptr), ids, tw, th


def attribute_matrix(frame, cam, attachments=("color", "pbr"), extra=None):
    """Per-Gaussian attribute columns to blend and their (name, slice) layout."""
    cols, layout = [], []
    pos = 0

    def add(name, a):
        nonlocal pos
        a = np.asarray(a, dtype=np.float64)
        a = a.reshape(len(frame), -1) if a.size else a.reshape(len(frame), a.shape[-1] if a.ndim > 1 else 1)
        cols.append(a)
        layout.append((name, slice(pos, pos + a.shape[1]), a.shape[1]))
        pos += a.shape[1]

    if "color" in attachments:
        add("color", frame.colors(cam.center))
    if "pbr" in attachments and frame.has_pbr:
        add("base_color", frame.base_color)
        add("roughness", frame.roughness)
        add("ao", frame.ao)
    for name, a in (extra or {}).items():
        add(name, a)
    if not cols:
        return np.zeros((len(frame), 0)), layout
    return np.ascontiguousarray(np.concatenate(cols, axis=1)), layout


def raster_pixels(scene, cam, pixels, attrs, tile_ptr, tile_idx, pix_tile, record=False, threads=None,
                  t_near=T_NEAR, alpha_min=ALPHA_MIN):
    """Run the compositing kernel on a subset of pixels (flat indices)."""
    pixels = np.ascontiguousarray(pixels, dtype=np.int64)
    m = pixels.size
    origins, dirs = cam.pixel_rays(pixels)
    mu, P, opac, nax, _ = scene
    counts = np.diff(tile_ptr)
    max_cand = int(counts.max()) if counts.size else 0
    out_t = np.zeros(m)
    out_n = np.zeros((m, 3))
    out_attr = np.zeros((m, attrs.shape[1]))
    out_alpha = np.zeros(m)
    out_count = np.zeros(m, dtype=np.int64)
    empty_i = np.zeros(0, dtype=np.int64)
    empty_f = np.zeros(0)
    args = (pixels, origins, dirs, pix_tile, tile_ptr, tile_idx, mu, P, opac, nax, attrs, t_near, alpha_min,
            T_STOP, max(max_cand, 1), out_t, out_n, out_attr, out_alpha, out_count)
    run_ranges(K.raster_kernel, m, *args, np.zeros(m, dtype=np.int64), empty_i, empty_f, empty_f, 0,
               threads=threads)
    contrib = None
    if record:
        ptr = np.zeros(m + 1, dtype=np.int64)
        ptr[1:] = np.cumsum(out_count)
        rec_idx = np.zeros(ptr[-1], dtype=np.int64)
        rec_w = np.zeros(ptr[-1])
        rec_t = np.zeros(ptr[-1])
        run_ranges(K.raster_kernel, m, *args, ptr[:-1].copy(), rec_idx, rec_w, rec_t, 1, threads=threads)
        contrib = (ptr, rec_idx, rec_w, rec_t)
    return out_t, out_n, out_attr, out_alpha, out_count, contrib


def rasterize(frame, cam, attachments=("color", "pbr"), extra=None, record=False, threads=None,
              bg_threshold=BG_THRESHOLD, tile=TILE):
    """Render a GBuffer for ``cam``.

    ``extra`` maps names to per-Gaussian arrays blended as additional maps;
    ``record`` keeps per-pixel contribution lists (for baking and energies).
    """
    W, H = cam.width, cam.height
    attrs, layout = attribute_matrix(frame, cam, attachments, extra)
    scene = pack_scene(frame)
    tile_ptr, tile_idx, tw, _ = bin_tiles(frame, cam, tile)
    pix = np.arange(W * H)
    pix_tile = (pix // W // tile) * tw + (pix % W) // tile
    t, nrm, attr, alpha, count, contrib = raster_pixels(scene, cam, pix, attrs, tile_ptr, tile_idx,
                                                        pix_tile.astype(np.int64), record, threads)
    fg = alpha >= bg_threshold
    depth = np.where(fg, t, 0.0).reshape(H, W)
    normal = np.where(fg[:, None], nrm, 0.0).reshape(H, W, 3)
    maps = {}
    for name, sl, width in layout:
        m = attr[:, sl]
        maps[name] = m.reshape(H, W) if width == 1 else m.reshape(H, W, width)
    color = maps.pop("color", np.zeros((H, W, 3)))
    gb = GBuffer(W, H, color, depth, normal, None, alpha.reshape(H, W), maps, count.reshape(H, W), contrib,
                 bg_threshold)
    gb.normal_depth = depth_to_normal(depth, cam)
    return gb


def backproject(depth, cam):
    """World points for a (H, W) ray-distance depth map."""
    o, d = cam.pixel_rays()
    return (o + d * depth.reshape(-1, 1)).reshape(cam.height, cam.width, 3)


def depth_to_normal(depth, cam):
    """Normals from a depth map by central differences of back-projected points.

    Oriented towards the camera; zero wherever the pixel or one of its four
    neighbours is background or outside the image.
    """
    return region_depth_to_normal(depth, cam, 0, 0)


def region_depth_to_normal(depth, cam, x0, y0):
    """``depth_to_normal`` on a window whose top-left pixel is (x0, y0).

    Window-edge pixels get zero; image-edge pixels get zero as in the full map.
    """
    h, w = depth.shape
    out = np.zeros((h, w, 3))
    if h < 3 or w < 3:
        return out
    ys, xs = np.mgrid[y0:y0 + h, x0:x0 + w]
    pix = (ys * cam.width + xs).ravel()
    o, d = cam.pixel_rays(pix)
    pts = (o + d * depth.reshape(-1, 1)).reshape(h, w, 3)
    d = d.reshape(h, w, 3)
    valid = depth > 0
    ok = np.zeros((h, w), dtype=bool)
    ok[1:-1, 1:-1] = (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2]
                      & valid[2:, 1:-1] & valid[:-2, 1:-1])
    ok &= (xs >= 1) & (xs <= cam.width - 2) & (ys >= 1) & (ys <= cam.height - 2)
    dx = pts[1:-1, 2:] - pts[1:-1, :-2]
    dy = pts[2:, 1:-1] - pts[:-2, 1:-1]
    n = np.cross(dx, dy)
    ln = np.sqrt(n[..., 0] ** 2 + n[..., 1] ** 2 + n[..., 2] ** 2)[..., None]
    n = np.where(ln > 0, n / np.where(ln > 0, ln, 1.0), 0.0)
    dd = d[1:-1, 1:-1]
    facing = n[..., 0] * dd[..., 0] + n[..., 1] * dd[..., 1] + n[..., 2] * dd[..., 2]
    out[1:-1, 1:-1] = n * np.where(facing > 0, -1.0, 1.0)[..., None]
    out[~ok] = 0.0
    return out


def normal_energy_terms(contrib, normal_axes, dirs, nd):
    """Per-pixel sum of w_i (1 - n_i . N_d) over pixels with a defined N_d.

    ``contrib`` is CSR (ptr, idx, w, t) over the pixels of ``dirs``/``nd``
    (flattened, aligned); n_i is flipped to face the ray origin.
    """
    ptr, idx, w, _ = contrib
    m = ptr.size - 1
    pix = np.repeat(np.arange(m), np.diff(ptr))
    n_i = normal_axes[idx]
    dp = dirs[pix]
    s = np.where(n_i[:, 0] * dp[:, 0] + n_i[:, 1] * dp[:, 1] + n_i[:, 2] * dp[:, 2] > 0, -1.0, 1.0)
    ndp = nd[pix]
    has = (ndp != 0).any(axis=1)
    cos = n_i[:, 0] * ndp[:, 0] + n_i[:, 1] * ndp[:, 1] + n_i[:, 2] * ndp[:, 2]
    term = np.where(has, w * (1.0 - s * cos), 0.0)
    return np.bincount(pix, weights=term, minlength=m)


def normal_consistency_value(frame, cam, threads=None):
    """E_normal for one view, with the total blending weight over pixels where N_d exists."""
    gb = rasterize(frame, cam, attachments=(), record=True, threads=threads)
    _, dirs = cam.pixel_rays()
    nd = gb.normal_depth.reshape(-1, 3)
    nax = pack_scene(frame)[3]
    per_pixel = normal_energy_terms(gb.contrib, nax, dirs, nd)
    ptr, idx, w, _ = gb.contrib
    has = np.linalg.norm(nd, axis=1) > 0
    m = ptr.size - 1
    wsum = np.bincount(np.repeat(np.arange(m), np.diff(ptr)), weights=w, minlength=m)
    return float(per_pixel.sum()), float(wsum[has].sum())


def normal_consistency_energy(frame, cam, threads=None, grad=True):
    """E_normal and per-Gaussian finite-difference gradients.

    Returns ``(E, grad_rot, grad_scale)`` where ``grad_rot`` is with respect
    to a rotation vector applied on the left of each orientation (step 1e-3
    rad) and ``grad_scale`` with respect to each scale (step 1e-3 * s).
    """
    from .energy import RenderedEnergy

    le = RenderedEnergy(frame, [cam], lam_color=0.0, lam_normal=1.0, threads=threads)
    e = le.total()
    if not grad:
        return e, None, None
    g = le.gradients(("rot", "scale"))
    return e, g["rot"], g["scale"]
