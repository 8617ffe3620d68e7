"""Rendered energies (photometric L1, normal consistency) with local finite differences.

Perturbing one Gaussian only changes the pixels inside its projected 3-sigma
box, plus a one-pixel ring for the depth-derived normal stencil. Gradients
are therefore computed by re-rendering a small window per perturbation and
differencing against the cached per-pixel energies of the full render. The
window render reproduces the full render bit-for-bit on unchanged pixels.
"""

import numpy as np

from . import _kernels as K
from .color import SH_C0, eval_sh
from .raster import (ALPHA_MIN, BG_THRESHOLD, T_NEAR, T_STOP, gaussian_geometry, normal_energy_terms,
                     pack_scene, pixel_ranges, projected_bounds, rasterize, region_depth_to_normal)
from .scene import axis_angle_to_quat, quat_multiply, quat_to_rotmat

FD_STEPS = {"pos": 1e-4, "rot": 1e-3, "scale": 1e-3, "color": 1e-3}


def _covariance(quat, scale):
    R = quat_to_rotmat(np.asarray(quat)[None])[0]
    return R @ np.diag(np.asarray(scale) ** 2) @ R.T


class _View:
    def __init__(self, frame, cam, photo, mask, need_normal, threads):
        self.cam = cam
        W, H = cam.width, cam.height
        gb = rasterize(frame, cam, attachments=("color",), record=need_normal, threads=threads)
        self.photo = None if photo is None else np.asarray(photo, dtype=np.float64).reshape(-1, 3)
        self.mask = np.ones(W * H, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).ravel()
        self.denom = max(int(self.mask.sum()), 1) * 3
        self.colors = frame.colors(cam.center)
        self.e_color = self._color_terms(gb.color.reshape(-1, 3), np.arange(W * H))
        _, self.dirs = cam.pixel_rays()
        if need_normal:
            self.e_normal = normal_energy_terms(gb.contrib, pack_scene(frame)[3], self.dirs,
                                                gb.normal_depth.reshape(-1, 3))
        else:
            self.e_normal = np.zeros(W * H)
        box = projected_bounds(frame.means, frame.covariances(), cam)
        self.x0, self.y0, self.x1, self.y1 = pixel_ranges(box, W, H)

    def _color_terms(self, color, pix):
        if self.photo is None:
            return np.zeros(len(pix))
        diff = np.abs(color - self.photo[pix]).sum(axis=1)
        return np.where(self.mask[pix], diff, 0.0) / self.denom


class RenderedEnergy:
    """Weighted sum ``lam_color * E_color + lam_normal * E_normal`` over views.

    E_color is the mean (over views with photos) of the per-view mean L1
    colour error over the mask; E_normal sums the per-pixel normal
    consistency terms over all views.
    """

    def __init__(self, frame, cams, photos=None, masks=None, lam_color=1.0, lam_normal=1.0, threads=None):
        self.frame = frame
        self.cams = list(cams)
        self.lam_color = float(lam_color)
        self.lam_normal = float(lam_normal)
        self.threads = threads
        if photos is None:
            photos = [c.image if lam_color > 0 else None for c in self.cams]
        if masks is None:
            masks = [None] * len(self.cams)
        self.n_photo = max(sum(p is not None for p in photos), 1)
        self.scene = pack_scene(frame)
        need_normal = self.lam_normal > 0
        self.views = [_View(frame, c, p, m, need_normal, threads) for c, p, m in zip(self.cams, photos, masks)]

    def values(self):
        ec = sum(float(v.e_color.sum()) for v in self.views) / self.n_photo
        en = sum(float(v.e_normal.sum()) for v in self.views)
        return {"color": ec, "normal": en}

    def total(self):
        v = self.values()
        return self.lam_color * v["color"] + self.lam_normal * v["normal"]

    # ------------------------------------------------------------------ local evaluation
    def local_delta(self, i, mean, quat, scale, sh=None):
        """Change of the weighted energy when Gaussian ``i`` takes the given geometry."""
        mu_all, P_all, opac, nax_all, _ = self.scene
        P_i, nax_i, _ = gaussian_geometry(quat[None], scale[None])
        cov_i = _covariance(quat, scale)
        total = 0.0
        for v in self.views:
            cam = v.cam
            W, H = cam.width, cam.height
            box = projected_bounds(mean[None], cov_i[None], cam)
            bx0, by0, bx1, by1 = (a[0] for a in pixel_ranges(box, W, H))
            ox0, oy0, ox1, oy1 = v.x0[i], v.y0[i], v.x1[i], v.y1[i]
            has_new = bx1 >= bx0 and by1 >= by0
            has_old = ox1 >= ox0 and oy1 >= oy0
            if not (has_new or has_old):
                continue
            if has_new and has_old:
                rx0, ry0, rx1, ry1 = min(bx0, ox0), min(by0, oy0), max(bx1, ox1), max(by1, oy1)
            elif has_new:
                rx0, ry0, rx1, ry1 = bx0, by0, bx1, by1
            else:
                rx0, ry0, rx1, ry1 = ox0, oy0, ox1, oy1
            pad = 2 if self.lam_normal > 0 else 0
            rx0, ry0 = max(rx0 - pad, 0), max(ry0 - pad, 0)
            rx1, ry1 = min(rx1 + pad, W - 1), min(ry1 + pad, H - 1)
            cand = np.flatnonzero((v.x0 <= rx1) & (v.x1 >= rx0) & (v.y0 <= ry1) & (v.y1 >= ry0)
                                  & (v.x1 >= v.x0) & (v.y1 >= v.y0))
            if not np.any(cand == i):
                cand = np.sort(np.append(cand, i))
            j = int(np.searchsorted(cand, i))
            mu = mu_all[cand].copy()
            P = P_all[cand].copy()
            nax = nax_all[cand].copy()
            col = v.colors[cand].copy()
            mu[j] = mean
            P[j] = P_i[0]
            nax[j] = nax_i[0]
            if v.photo is not None:
                src = self.frame.sh[i] if sh is None else sh
                if src is not None:
                    d = mean - cam.center
                    col[j] = eval_sh(src[None], (d / np.linalg.norm(d))[None])[0]
            h, w = ry1 - ry0 + 1, rx1 - rx0 + 1
            ys, xs = np.mgrid[ry0:ry1 + 1, rx0:rx1 + 1]
            pix = (ys * W + xs).ravel()
            t, nrm, attr, alpha, contrib = _render_window(cam, pix, mu, P, opac[cand], nax, col,
                                                          self.lam_normal > 0)
            # pixels whose stencil lies inside the window (or beyond the image edge)
            inner = np.ones((h, w), dtype=bool)
            if self.lam_normal > 0:
                if rx0 > 0:
                    inner[:, 0] = False
                if rx1 < W - 1:
                    inner[:, -1] = False
                if ry0 > 0:
                    inner[0, :] = False
                if ry1 < H - 1:
                    inner[-1, :] = False
            inner = inner.ravel()
            new = np.zeros(pix.size)
            old = np.zeros(pix.size)
            if self.lam_color > 0 and v.photo is not None:
                new += self.lam_color / self.n_photo * v._color_terms(attr, pix)
                old += self.lam_color / self.n_photo * v.e_color[pix]
            if self.lam_normal > 0:
                depth = np.where(alpha >= BG_THRESHOLD, t, 0.0).reshape(h, w)
                nd = region_depth_to_normal(depth, cam, rx0, ry0).reshape(-1, 3)
                new += self.lam_normal * normal_energy_terms(contrib, nax, v.dirs[pix], nd)
                old += self.lam_normal * v.e_normal[pix]
            total += float((new[inner] - old[inner]).sum())
        return total

    def gradients(self, params=("pos", "rot", "scale", "color"), indices=None):
        """Central finite-difference gradients, each (N, 3), keyed by parameter class.

        ``rot`` is with respect to a left-applied rotation vector; ``color``
        with respect to the SH DC coefficients (absent without SH).
        """
        f = self.frame
        n = len(f)
        out = {p: np.zeros((n, 3)) for p in params}
        idx = range(n) if indices is None else indices
        for i in idx:
            mean, quat, scale = f.means[i], f.quats[i], f.scales[i]
            for p in params:
                for k in range(3):
                    h = FD_STEPS[p]
                    if p == "pos":
                        e = np.zeros(3)
                        e[k] = h
                        dp = self.local_delta(i, mean + e, quat, scale)
                        dm = self.local_delta(i, mean - e, quat, scale)
                        out[p][i, k] = (dp - dm) / (2 * h)
                    elif p == "rot":
                        e = np.zeros(3)
                        e[k] = h
                        qp = quat_multiply(axis_angle_to_quat(e), quat)
                        qm = quat_multiply(axis_angle_to_quat(-e), quat)
                        dp = self.local_delta(i, mean, qp, scale)
                        dm = self.local_delta(i, mean, qm, scale)
                        out[p][i, k] = (dp - dm) / (2 * h)
                    elif p == "scale":
                        hs = h * scale[k]
                        sp = scale.copy()
                        sm = scale.copy()
                        sp[k] += hs
                        sm[k] -= hs
                        dp = self.local_delta(i, mean, quat, sp)
                        dm = self.local_delta(i, mean, quat, sm)
                        out[p][i, k] = (dp - dm) / (2 * hs)
                    elif p == "color":
                        if f.sh is None or self.lam_color == 0:
                            continue
                        shp = f.sh[i].copy()
                        shm = f.sh[i].copy()
                        shp[0, k] += h
                        shm[0, k] -= h
                        dp = self.local_delta(i, mean, quat, scale, shp)
                        dm = self.local_delta(i, mean, quat, scale, shm)
                        out[p][i, k] = (dp - dm) / (2 * h)
        return out


def _render_window(cam, pix, mu, P, opac, nax, colors, record):
    m = pix.size
    origins, dirs = cam.pixel_rays(pix)
    n = mu.shape[0]
    tile_ptr = np.array([0, n], dtype=np.int64)
    tile_idx = np.arange(n, dtype=np.int64)
    pix_tile = np.zeros(cam.width * cam.height, dtype=np.int64)
    attrs = np.ascontiguousarray(colors, dtype=np.float64)
    out_t = np.zeros(m)
    out_n = np.zeros((m, 3))
    out_attr = np.zeros((m, 3))
    out_alpha = np.zeros(m)
    out_count = np.zeros(m, dtype=np.int64)
    args = (pix.astype(np.int64), origins, dirs, pix_tile, tile_ptr, tile_idx, np.ascontiguousarray(mu),
            np.ascontiguousarray(P), np.ascontiguousarray(opac), np.ascontiguousarray(nax), attrs, T_NEAR,
            ALPHA_MIN, T_STOP, max(n, 1), out_t, out_n, out_attr, out_alpha, out_count)
    contrib = None
    if not record:
        ei = np.zeros(0, dtype=np.int64)
        ef = np.zeros(0)
        K.raster_kernel(0, m, *args, np.zeros(m, dtype=np.int64), ei, ef, ef, 0)
    else:
        # one pass into fixed-size slots, then compact to CSR
        slots = max(n, 1)
        ri = np.zeros(m * slots, dtype=np.int64)
        rw = np.zeros(m * slots)
        rt = np.zeros(m * slots)
        K.raster_kernel(0, m, *args, np.arange(m, dtype=np.int64) * slots, ri, rw, rt, 1)
        keep = (np.arange(slots)[None, :] < out_count[:, None]).ravel()
        ptr = np.zeros(m + 1, dtype=np.int64)
        ptr[1:] = np.cumsum(out_count)
        contrib = (ptr, ri[keep], rw[keep], rt[keep])
    return out_t, out_n, out_attr, out_alpha, contrib


def sh_dc_step(sh, delta_rgb):
    """Shift SH DC coefficients so the DC colour moves by ``delta_rgb``."""
    out = np.array(sh, copy=True)
    out[:, 0, :] += np.asarray(delta_rgb) / SH_C0
    return out
