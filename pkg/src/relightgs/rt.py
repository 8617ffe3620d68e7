"""Gaussian ray tracing over icosahedron proxies and a two-level BVH.

The top level is a median-split BVH over per-instance AABBs; the bottom
level is one BVH over the 20 triangles of a canonical icosahedron that every
instance shares through its world-to-proxy map. Proxy hits only cull: the
contribution itself is the max-response evaluation, clipped at 3 sigma.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .parallel import run_ranges
from .raster import ALPHA_MIN, BG_THRESHOLD, ICO_INFLATE, PROXY_SIGMA, T_NEAR, T_STOP, max_response_batch, pack_scene

LEAF_SIZE = 4


def icosahedron(radius=1.0):
    """Vertices (12, 3) and faces (20, 3) of a regular icosahedron with given circumradius."""
    p = (1.0 + 5 ** 0.5) / 2.0
    v = np.array([[-1, p, 0], [1, p, 0], [-1, -p, 0], [1, -p, 0],
                  [0, -1, p], [0, 1, p], [0, -1, -p], [0, 1, -p],
                  [p, 0, -1], [p, 0, 1], [-p, 0, -1], [-p, 0, 1]], dtype=np.float64)
    v *= radius / np.linalg.norm(v[0])
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]], dtype=np.int64)
    return v, f


def build_median_bvh(lo, hi, leaf_size=LEAF_SIZE):
    """Median-split BVH over boxes; returns flat node arrays and primitive order.

    Splits along the longest axis of the centroid bounds; ties broken by
    primitive index, so the build is deterministic.
    """
    n = lo.shape[0]
    cent = 0.5 * (lo + hi)
    order = np.arange(n, dtype=np.int64)
    nodes_lo, nodes_hi, left, right, start, count = [], [], [], [], [], []

    def new_node():
        nodes_lo.append(None)
        nodes_hi.append(None)
        left.append(-1)
        right.append(-1)
        start.append(0)
        count.append(0)
        return len(nodes_lo) - 1

    root = new_node()
    stack = [(root, 0, n)]
    while stack:
        node, s, e = stack.pop()
        idx = order[s:e]
        nodes_lo[node] = lo[idx].min(axis=0) if e > s else np.zeros(3)
        nodes_hi[node] = hi[idx].max(axis=0) if e > s else np.zeros(3)
        if e - s <= leaf_size:
            start[node] = s
            count[node] = e - s
            continue
        c = cent[idx]
        axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
        perm = np.lexsort((idx, c[:, axis]))
        order[s:e] = idx[perm]
        mid = s + (e - s) // 2
        lch = new_node()
        rch = new_node()
        left[node] = lch
        right[node] = rch
        stack.append((rch, mid, e))
        stack.append((lch, s, mid))
    return (np.ascontiguousarray(np.array(nodes_lo)), np.ascontiguousarray(np.array(nodes_hi)),
            np.array(left, dtype=np.int64), np.array(right, dtype=np.int64),
            np.array(start, dtype=np.int64), np.array(count, dtype=np.int64), order)


@dataclass(eq=False)
class TwoLevelBVH:
    top: tuple
    bottom: tuple
    proxy_vertices: np.ndarray   # canonical icosahedron (12, 3)
    instance_lo: np.ndarray
    instance_hi: np.ndarray

    @property
    def num_nodes(self):
        return self.top[0].shape[0]

    def depth(self):
        lo, hi, left, right, start, count, order = self.top
        best = 0
        stack = [(0, 1)]
        while stack:
            node, d = stack.pop()
            best = max(best, d)
            if count[node] == 0 and left[node] >= 0:
                stack.append((left[node], d + 1))
                stack.append((right[node], d + 1))
        return best


_BOTTOM = None


def _bottom_level():
    global _BOTTOM
    if _BOTTOM is None:
        v, f = icosahedron(ICO_INFLATE)
        tris = np.ascontiguousarray(v[f])
        blo, bhi, bl, br, bs, bc, bo = build_median_bvh(tris.min(axis=1), tris.max(axis=1))
        _BOTTOM = (v, (tris, blo, bhi, bl, br, bs, bc, bo))
    return _BOTTOM


def proxy_world_vertices(frame, proxy_sigma=PROXY_SIGMA):
    """World-space proxy vertices, shape (N, 12, 3)."""
    v, _ = _bottom_level()
    R = frame.rotations()
    return frame.means[:, None, :] + np.einsum("nij,kj->nki", R * (proxy_sigma * frame.scales)[:, None, :], v)


def build_bvh(frame, leaf_size=LEAF_SIZE):
    if len(frame) == 0:
        raise ValueError("cannot build a BVH over an empty frame")
    v, bottom = _bottom_level()
    pv = proxy_world_vertices(frame)
    lo, hi = pv.min(axis=1), pv.max(axis=1)
    top = build_median_bvh(lo, hi, leaf_size)
    return TwoLevelBVH(top, bottom, v, lo, hi)


def _empty_top():
    z = np.zeros((1, 3))
    return (z, z - 1.0, np.array([-1]), np.array([-1]), np.array([0]), np.array([0]), np.zeros(0, dtype=np.int64))


def _prepare(frame, bvh):
    scene = pack_scene(frame)
    if bvh is None and len(frame) > 0:
        bvh = build_bvh(frame)
    if bvh is None:
        return scene, _empty_top(), _bottom_level()[1]
    return scene, bvh.top, bvh.bottom


def visibility(frame, bvh, x, n, omega, eps=0.02, t_stop=T_STOP, threads=None, stats=None):
    """Transmittance from ``x + eps * n`` along ``omega`` (batched over leading axis).

    ``t_stop`` = 0 disables early termination. ``stats`` (a dict) receives
    node and instance visit counts when given.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = np.broadcast_to(np.asarray(n, dtype=np.float64), x.shape)
    w = np.atleast_2d(np.asarray(omega, dtype=np.float64))
    w = w / np.linalg.norm(w, axis=-1, keepdims=True)
    m = max(x.shape[0], w.shape[0])
    origins = np.ascontiguousarray(np.broadcast_to(x + eps * n, (m, 3)))
    dirs = np.ascontiguousarray(np.broadcast_to(w, (m, 3)))
    out = np.ones(m)
    counters = np.zeros((m, 2), dtype=np.int64)
    if len(frame) > 0:
        scene, top, bottom = _prepare(frame, bvh)
        run_ranges(K.visibility_kernel, m, scene, top, bottom, origins, dirs, 0.0, ALPHA_MIN, float(t_stop), out,
                   counters, threads=threads)
    if stats is not None:
        stats["rays"] = stats.get("rays", 0) + m
        stats["nodes_visited"] = stats.get("nodes_visited", 0) + int(counters[:, 0].sum())
        stats["instances_tested"] = stats.get("instances_tested", 0) + int(counters[:, 1].sum())
        stats["instances"] = len(frame)
    return out


def visibility_bruteforce(frame, origin, direction, tmin=0.0):
    """Reference transmittance: product over every Gaussian, no acceleration or early stop."""
    if len(frame) == 0:
        return 1.0
    mu, P, opac, _, _ = pack_scene(frame)
    t, q = max_response_batch(mu, P, np.asarray(origin, dtype=np.float64), np.asarray(direction, dtype=np.float64))
    a = opac * np.exp(-0.5 * q)
    keep = (t > tmin) & (q <= K.CLIP_SQ) & (a >= ALPHA_MIN)
    return float(np.prod(1.0 - a[keep]))


def dump_stats(stats, path=None):
    """Traversal statistics as JSON text (written to ``path`` when given)."""
    s = dict(stats)
    if s.get("rays"):
        s["instances_tested_per_ray"] = s["instances_tested"] / s["rays"]
        if s.get("instances"):
            s["fraction_tested"] = s["instances_tested_per_ray"] / s["instances"]
    text = json.dumps(s, indent=2, sort_keys=True)
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text + "\n")
    return text


@dataclass
class SurfaceHit:
    t: float
    normal: np.ndarray
    base_color: np.ndarray | None
    roughness: float | None
    ao: float | None
    alpha: float

    @property
    def transmittance_remainder(self):
        return 1.0 - self.alpha


def trace_surfaces(frame, bvh, origins, dirs, attrs=None, threads=None, t_near=T_NEAR):
    """Batched sorted surface query.

    Returns (t_bar, normal, raw blended attrs, accumulated alpha); attribute
    columns default to [base_color, roughness, ao] when the frame has them.
    """
    origins = np.ascontiguousarray(np.atleast_2d(origins), dtype=np.float64)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    dirs = np.ascontiguousarray(dirs / np.linalg.norm(dirs, axis=-1, keepdims=True))
    m = origins.shape[0]
    if attrs is None:
        if frame.has_pbr:
            attrs = np.concatenate([frame.base_color, frame.roughness[:, None], frame.ao[:, None]], axis=1)
        else:
            attrs = np.zeros((len(frame), 0))
    attrs = np.ascontiguousarray(attrs, dtype=np.float64).reshape(len(frame), -1)
    out_t = np.zeros(m)
    out_n = np.zeros((m, 3))
    out_attr = np.zeros((m, attrs.shape[1]))
    out_alpha = np.zeros(m)
    if len(frame) > 0:
        scene, top, bottom = _prepare(frame, bvh)
        run_ranges(K.surface_kernel, m, scene, top, bottom, attrs, origins, dirs, t_near, ALPHA_MIN, T_STOP,
                   out_t, out_n, out_attr, out_alpha, threads=threads, chunk=64)
    return out_t, out_n, out_attr, out_alpha


def trace_surface(frame, bvh, origin, direction, bg_threshold=BG_THRESHOLD):
    """Alpha-blended surface hit along one ray, or None if accumulated alpha < threshold."""
    t, n, attr, alpha = trace_surfaces(frame, bvh, origin, direction)
    if alpha[0] < bg_threshold:
        return None
    a = attr[0] / alpha[0]
    if frame.has_pbr:
        return SurfaceHit(float(t[0]), n[0], a[:3], float(a[3]), float(a[4]), float(alpha[0]))
    return SurfaceHit(float(t[0]), n[0], None, None, None, float(alpha[0]))
