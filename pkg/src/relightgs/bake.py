"""Baking 2D material maps into per-Gaussian attributes.

With geometry fixed, a rendered attribute map is a sparse linear function
of the per-Gaussian attributes: each foreground pixel is the normalised
blend sum_i (w_i / alpha) a_i. Baking is therefore a box-constrained least
squares problem, solved by projected gradient descent with a step taken
from a computed Lipschitz bound, which makes the loss monotone.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import eigsh
from scipy.spatial import cKDTree

from .color import sh_dc_color
from .config import Config
from .raster import BG_THRESHOLD, rasterize
from .scene import GaussianSequence, SceneError


class BakeError(RuntimeError):
    pass


@dataclass(eq=False)
class BakeResult:
    sequence: GaussianSequence
    loss: list                      # total loss before iteration 0, then after each iteration
    coverage: np.ndarray            # (T, N) number of supervising pixels per Gaussian
    residuals: list = field(default_factory=list)  # per (frame, view) mean abs re-render error
    iterations: int = 0
    converged: bool = False

    def coverage_log(self):
        """Per-Gaussian coverage as plain text (one line per frame)."""
        lines = ["# frame uncovered covered min_hits max_hits"]
        for t, c in enumerate(self.coverage):
            lines.append(f"{t} {int((c == 0).sum())} {int((c > 0).sum())} {int(c.min(initial=0))} "
                         f"{int(c.max(initial=0))}")
        for t, c in enumerate(self.coverage):
            for i in np.flatnonzero(c == 0):
                lines.append(f"uncovered frame={t} gaussian={int(i)}")
        return "\n".join(lines) + "\n"


def _views_for(views, t):
    if views and isinstance(views[0], (list, tuple)):
        return views[t]
    return views


def blend_operator(frame, cam, mask=None, threads=None):
    """Sparse (pixels x N) matrix of normalised blending weights for ``cam``.

    Only foreground pixels (and those in ``mask`` when given) get rows;
    returns the matrix and the flat pixel indices of its rows.
    """
    gb = rasterize(frame, cam, attachments=(), record=True, threads=threads)
    ptr, idx, w, _ = gb.contrib
    alpha = gb.alpha.ravel()
    keep = alpha >= BG_THRESHOLD
    if mask is not None:
        keep &= np.asarray(mask, dtype=bool).ravel()
    pix = np.flatnonzero(keep)
    counts = np.diff(ptr)
    rows_all = np.repeat(np.arange(ptr.size - 1), counts)
    sel = keep[rows_all]
    remap = -np.ones(ptr.size - 1, dtype=np.int64)
    remap[pix] = np.arange(pix.size)
    r = remap[rows_all[sel]]
    vals = w[sel] / alpha[rows_all[sel]]
    A = sp.csr_matrix((vals, (r, idx[sel])), shape=(pix.size, len(frame)))
    A.sum_duplicates()
    return A, pix


def _lipschitz(A):
    """Largest eigenvalue of A^T A (times a safety factor)."""
    AtA = (A.T @ A).tocsr()
    n = AtA.shape[0]
    if AtA.nnz == 0:
        return 0.0
    if n <= 64:
        lam = float(np.linalg.eigvalsh(AtA.toarray())[-1])
    else:
        lam = float(eigsh(AtA, k=1, which="LA", return_eigenvectors=False, tol=1e-6, v0=np.ones(n))[0])
    return lam * 1.01 + 1e-12


def _initial(frame, which):
    n = len(frame)
    if which == "ao":
        return np.zeros((n, 1))
    if frame.has_sh:
        return sh_dc_color(frame.sh)
    if frame.has_pbr:
        return np.clip(np.array(frame.base_color), 0, 1)
    return np.full((n, 3), 0.5)


def _with_attribute(frame, which, values, config):
    n = len(frame)
    kw = {}
    if not frame.has_pbr:
        kw = dict(base_color=np.clip(_initial(frame, "base_color"), 0, 1),
                  roughness=np.full(n, config.roughness_default), ao=np.zeros(n))
    else:
        kw = dict(base_color=np.array(frame.base_color), roughness=np.array(frame.roughness),
                  ao=np.array(frame.ao))
    if which == "ao":
        kw["ao"] = values[:, 0]
    else:
        kw["base_color"] = values
    return frame.replace(**kw)


def bake_attribute(sequence, views, maps, which, config=None, iters=None, lambda_t=None, threads=None,
                   check_monotone=True):
    """Fit ``which`` ('ao' or 'base_color') of every frame to its material maps.

    ``views`` is one camera list shared by all frames or one list per frame;
    ``maps[t][v]`` is the MaterialMapSet of frame ``t`` seen from view ``v``.
    AO is supervised on every foreground pixel of its map, base colour only
    on pixels flagged valid. The temporal penalty applies to base colour.
    """
    if which not in ("ao", "base_color"):
        raise ValueError("which must be 'ao' or 'base_color'")
    config = config or Config()
    if isinstance(sequence, GaussianSequence):
        frames = list(sequence.frames)
    else:
        frames = list(sequence)
    T = len(frames)
    iters = config.bake_iters if iters is None else int(iters)
    lam = (config.lambda_temporal_bake if lambda_t is None else float(lambda_t)) if which == "base_color" else 0.0
    C = 1 if which == "ao" else 3

    ops, targets = [], []
    coverage = np.zeros((T, len(frames[0])), dtype=np.int64)
    for t, f in enumerate(frames):
        mats, rhs = [], []
        for v, cam in enumerate(_views_for(views, t)):
            m = maps[t][v]
            mask = (m.depth > 0) if which == "ao" else m.valid
            A, pix = blend_operator(f, cam, mask, threads)
            tgt = m.ao.ravel()[pix][:, None] if which == "ao" else m.basecolor.reshape(-1, 3)[pix]
            mats.append(A)
            rhs.append(tgt)
        A = sp.vstack(mats).tocsr() if mats else sp.csr_matrix((0, len(f)))
        ops.append(A)
        targets.append(np.concatenate(rhs) if rhs else np.zeros((0, C)))
        coverage[t] = np.diff(A.tocsc().indptr)

    x = np.stack([_initial(f, which) for f in frames])  # (T, N, C)
    x = np.clip(x, 0.0, 1.0)
    covered = (coverage > 0)[..., None]
    lip = np.array([2.0 * _lipschitz(A) for A in ops]) + (8.0 * lam if T > 1 else 0.0)
    step = np.where(lip > 0, 1.0 / np.maximum(lip, 1e-300), 0.0)[:, None, None]

    def loss_and_grad(x):
        total = 0.0
        g = np.zeros_like(x)
        for t in range(T):
            r = ops[t] @ x[t] - targets[t]
            total += float(np.sum(r * r))
            g[t] = 2.0 * (ops[t].T @ r)
        if lam > 0 and T > 1:
            d = x[1:] - x[:-1]
            total += lam * float(np.sum(d * d))
            g[1:] += 2.0 * lam * d
            g[:-1] -= 2.0 * lam * d
        return total, g

    f_cur, g = loss_and_grad(x)
    trace = [f_cur]
    converged = False
    k = 0
    for k in range(1, iters + 1):
        x_new = np.where(covered, np.clip(x - step * g, 0.0, 1.0), x)
        f_new, g_new = loss_and_grad(x_new)
        if check_monotone and f_new > f_cur * (1 + 1e-12) + 1e-15:
            raise BakeError(f"baking loss increased at iteration {k}: {f_cur!r} -> {f_new!r}")
        trace.append(f_new)
        rel = abs(f_cur - f_new) / max(abs(f_cur), 1e-300)
        x, f_cur, g = x_new, f_new, g_new
        if rel < config.bake_tol:
            converged = True
            break

    out_frames = [_with_attribute(f, which, x[t], config) for t, f in enumerate(frames)]
    residuals = []
    for t, f in enumerate(out_frames):
        for v, cam in enumerate(_views_for(views, t)):
            gb = rasterize(f, cam, attachments=("pbr",), threads=threads)
            m = maps[t][v]
            mask = ((m.depth > 0) if which == "ao" else m.valid) & gb.foreground
            if which == "ao":
                err = np.abs(gb.normalized("ao") - m.ao)[mask]
            else:
                err = np.abs(gb.normalized("base_color") - m.basecolor)[mask]
            residuals.append({"frame": t, "view": v, "pixels": int(mask.sum()),
                              "mean_abs": float(err.mean()) if err.size else 0.0})
    return BakeResult(GaussianSequence(out_frames), trace, coverage, residuals, k, converged)


# --------------------------------------------------------------------------- roughness

def texel_world_positions(mesh, texture_shape):
    """World position of every texel centre covered by a mesh triangle in UV space.

    UV (0, 0) is the bottom-left corner of the texture. Returns positions
    (K, 3) and the flat texel indices they belong to.
    """
    Ht, Wt = texture_shape
    uv = np.asarray(mesh.uvs, dtype=np.float64)  # (F, 3, 2) per-corner
    V = np.asarray(mesh.vertices, dtype=np.float64)[np.asarray(mesh.faces)]
    pos, ids = [], []
    for f in range(uv.shape[0]):
        a, b, c = uv[f] * [Wt, Ht]
        lo = np.floor(np.minimum(np.minimum(a, b), c)).astype(int)
        hi = np.ceil(np.maximum(np.maximum(a, b), c)).astype(int)
        xs = np.arange(max(lo[0], 0), min(hi[0], Wt))
        ys = np.arange(max(lo[1], 0), min(hi[1], Ht))
        if xs.size == 0 or ys.size == 0:
            continue
        gx, gy = np.meshgrid(xs + 0.5, ys + 0.5)
        p = np.stack([gx.ravel(), gy.ravel()], axis=1)
        m = np.array([b - a, c - a]).T
        det = np.linalg.det(m)
        if abs(det) < 1e-12:
            continue
        st = np.linalg.solve(m, (p - a).T).T
        inside = (st[:, 0] >= -1e-9) & (st[:, 1] >= -1e-9) & (st.sum(axis=1) <= 1 + 1e-9)
        st = st[inside]
        w = V[f]
        pos.append(w[0] + st[:, :1] * (w[1] - w[0]) + st[:, 1:] * (w[2] - w[0]))
        col = p[inside, 0].astype(int)
        row = Ht - 1 - p[inside, 1].astype(int)
        ids.append(row * Wt + col)
    if not pos:
        return np.zeros((0, 3)), np.zeros(0, dtype=np.int64)
    pos = np.concatenate(pos)
    ids = np.concatenate(ids)
    # a texel covered by two triangles keeps its first (lowest triangle index) position
    _, first = np.unique(ids, return_index=True)
    first = np.sort(first)
    return pos[first], ids[first]


def assign_roughness(frame, mesh=None, texture=None, config=None):
    """Give every Gaussian the roughness of its nearest texel in world space.

    Without a texture all Gaussians get the configured default, as do
    Gaussians farther than ``roughness_dmax`` from every texel.
    """
    config = config or Config()
    n = len(frame)
    if texture is None:
        r = np.full(n, config.roughness_default)
    else:
        tex = np.asarray(texture, dtype=np.float64)
        if mesh is None or tex.size == 0 or len(mesh.faces) == 0:
            raise SceneError("roughness assignment needs a non-empty mesh and texture")
        if tex.ndim == 3:
            tex = tex[..., 0]
        pos, ids = texel_world_positions(mesh, tex.shape)
        if len(pos) == 0:
            raise SceneError("no texel is covered by the mesh UV layout")
        dist, j = cKDTree(pos).query(frame.means)
        r = np.where(dist <= config.roughness_dmax, np.clip(tex.ravel()[ids[j]], 0, 1), config.roughness_default)
    if frame.has_pbr:
        return frame.replace(roughness=r)
    base = _initial(frame, "base_color")
    return frame.replace(base_color=np.clip(base, 0, 1), roughness=r, ao=np.zeros(n))


def assign_roughness_sequence(sequence, mesh=None, texture=None, config=None):
    """Assign on frame 0 and copy the (time-invariant) roughness to every frame."""
    frames = list(sequence)
    first = assign_roughness(frames[0], mesh, texture, config)
    out = [first]
    for f in frames[1:]:
        if f.has_pbr:
            out.append(f.replace(roughness=first.roughness))
        else:
            out.append(f.replace(base_color=np.clip(_initial(f, "base_color"), 0, 1), roughness=first.roughness,
                                 ao=np.zeros(len(f))))
    return GaussianSequence(out)


# --------------------------------------------------------------------------- reparameterisation

def reparameterize(frame, strict=True):
    """Drop the view-dependent colour block, keeping everything else bit-identical."""
    if not frame.has_pbr:
        raise SceneError("cannot reparameterize a frame without material attributes")
    if not frame.has_sh:
        if strict:
            raise SceneError("frame is already reparameterized")
        return frame
    return frame.replace(sh=None)
