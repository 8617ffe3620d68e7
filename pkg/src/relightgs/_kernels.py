"""Compiled inner loops shared by the rasterizer, ray tracer and Monte-Carlo estimators.

Scene data is passed as tuples of arrays:

    scene  = (means, precisions, opacities, normal_axes, proxy_maps)
    top    = (lo, hi, left, right, start, count, order)      # instance BVH
    bottom = (tris, lo, hi, left, right, start, count, order)  # icosahedron BVH

All kernels process an index range ``[start, end)`` so callers can split
work across threads; every output element depends only on its own index.
"""

import math

import numpy as np
from numba import njit, uint64

jit = njit(cache=True, nogil=True, error_model="numpy")

CLIP_SQ = 9.0  # 3 sigma, squared Mahalanobis distance
STACK_SIZE = 96

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


# --------------------------------------------------------------------------- RNG

@jit
def mix64(x):
    x = uint64(x)
    x ^= x >> uint64(30)
    x *= _M1
    x ^= x >> uint64(27)
    x *= _M2
    x ^= x >> uint64(31)
    return x


@jit
def make_stream(seed, view, pixel, purpose):
    h = mix64(uint64(seed) + _GOLDEN)
    h = mix64(h ^ (uint64(purpose) * _GOLDEN))
    h = mix64(h ^ (uint64(view) + _M1))
    h = mix64(h ^ (uint64(pixel) * _M2 + _GOLDEN))
    return h


@jit
def rand01(stream, counter):
    h = mix64(stream ^ mix64((uint64(counter) + uint64(1)) * _GOLDEN))
    return float(h >> uint64(11)) * (1.0 / 9007199254740992.0)


@jit
def make_streams(seed, view, pixels, purpose):
    out = np.empty(pixels.shape[0], dtype=np.uint64)
    for k in range(pixels.shape[0]):
        out[k] = make_stream(seed, view, pixels[k], purpose)
    return out


# --------------------------------------------------------------------------- geometry helpers

@jit
def onb(n):
    """Orthonormal tangent frame (t, b) for unit n (Duff et al.)."""
    sign = 1.0 if n[2] >= 0.0 else -1.0
    a = -1.0 / (sign + n[2])
    b = n[0] * n[1] * a
    t = np.empty(3)
    s = np.empty(3)
    t[0] = 1.0 + sign * n[0] * n[0] * a
    t[1] = sign * b
    t[2] = -sign * n[0]
    s[0] = b
    s[1] = sign + n[1] * n[1] * a
    s[2] = -n[1]
    return t, s


@jit
def local_to_world(t, s, n, x, y, z, out):
    out[0] = t[0] * x + s[0] * y + n[0] * z
    out[1] = t[1] * x + s[1] * y + n[1] * z
    out[2] = t[2] * x + s[2] * y + n[2] * z


@jit
def cosine_sample(t, s, n, u1, u2, out):
    r = math.sqrt(u1)
    phi = 2.0 * math.pi * u2
    local_to_world(t, s, n, r * math.cos(phi), r * math.sin(phi), math.sqrt(max(0.0, 1.0 - u1)), out)


@jit
def dot3(a, b):
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]


@jit
def max_response(mu, P, o, d):
    """Ray parameter of maximum Gaussian response and the squared Mahalanobis distance there."""
    dx = mu[0] - o[0]
    dy = mu[1] - o[1]
    dz = mu[2] - o[2]
    pd0 = P[0, 0] * d[0] + P[0, 1] * d[1] + P[0, 2] * d[2]
    pd1 = P[1, 0] * d[0] + P[1, 1] * d[1] + P[1, 2] * d[2]
    pd2 = P[2, 0] * d[0] + P[2, 1] * d[1] + P[2, 2] * d[2]
    dpd = d[0] * pd0 + d[1] * pd1 + d[2] * pd2
    t = (pd0 * dx + pd1 * dy + pd2 * dz) / dpd
    ex = o[0] + t * d[0] - mu[0]
    ey = o[1] + t * d[1] - mu[1]
    ez = o[2] + t * d[2] - mu[2]
    q = (ex * (P[0, 0] * ex + P[0, 1] * ey + P[0, 2] * ez)
         + ey * (P[1, 0] * ex + P[1, 1] * ey + P[1, 2] * ez)
         + ez * (P[2, 0] * ex + P[2, 1] * ey + P[2, 2] * ez))
    return t, max(q, 0.0)


@jit
def ray_aabb(lo, hi, o, inv, tmax):
    t0 = 0.0
    t1 = tmax
    for k in range(3):
        a = (lo[k] - o[k]) * inv[k]
        b = (hi[k] - o[k]) * inv[k]
        if a > b:
            a, b = b, a
        # NaN from 0 * inf means the ray lies in the slab plane: treat as inside
        if a == a and a > t0:
            t0 = a
        if b == b and b < t1:
            t1 = b
        if t0 > t1:
            return False
    return True


@jit
def ray_triangle(o, d, v0, v1, v2):
    """Two-sided Moller-Trumbore; returns hit distance or -1."""
    e1x = v1[0] - v0[0]
    e1y = v1[1] - v0[1]
    e1z = v1[2] - v0[2]
    e2x = v2[0] - v0[0]
    e2y = v2[1] - v0[1]
    e2z = v2[2] - v0[2]
    px = d[1] * e2z - d[2] * e2y
    py = d[2] * e2x - d[0] * e2z
    pz = d[0] * e2y - d[1] * e2x
    det = e1x * px + e1y * py + e1z * pz
    if abs(det) < 1e-14:
        return -1.0
    inv = 1.0 / det
    tx = o[0] - v0[0]
    ty = o[1] - v0[1]
    tz = o[2] - v0[2]
    u = (tx * px + ty * py + tz * pz) * inv
    if u < -1e-9 or u > 1.0 + 1e-9:
        return -1.0
    qx = ty * e1z - tz * e1y
    qy = tz * e1x - tx * e1z
    qz = tx * e1y - ty * e1x
    v = (d[0] * qx + d[1] * qy + d[2] * qz) * inv
    if v < -1e-9 or u + v > 1.0 + 1e-9:
        return -1.0
    return (e2x * qx + e2y * qy + e2z * qz) * inv


@jit
def proxy_hit(bottom, M, mu, o, d, oc, dc, inv, stack):
    """True if the ray meets instance proxy (canonical icosahedron under map M) at t > 0."""
    tris, lo, hi, left, right, start, count, order = bottom
    for r in range(3):
        oc[r] = M[r, 0] * (o[0] - mu[0]) + M[r, 1] * (o[1] - mu[1]) + M[r, 2] * (o[2] - mu[2])
        dc[r] = M[r, 0] * d[0] + M[r, 1] * d[1] + M[r, 2] * d[2]
    for r in range(3):
        inv[r] = 1.0 / dc[r]
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not ray_aabb(lo[node], hi[node], oc, inv, np.inf):
            continue
        if count[node] > 0:
            for k in range(start[node], start[node] + count[node]):
                tri = order[k]
                if ray_triangle(oc, dc, tris[tri, 0], tris[tri, 1], tris[tri, 2]) > 0.0:
                    return True
        else:
            stack[sp] = left[node]
            stack[sp + 1] = right[node]
            sp += 2
    return False


# --------------------------------------------------------------------------- visibility

@jit
def trace_visibility(scene, top, bottom, o, d, tmin, alpha_min, t_stop, stack, bstack, tmp, counters):
    """Unsorted transmittance product along the ray (order-independent)."""
    mu, P, opac, nax, M = scene
    lo, hi, left, right, start, count, order = top
    inv = tmp[0]
    oc = tmp[1]
    dc = tmp[2]
    binv = tmp[3]
    for r in range(3):
        inv[r] = 1.0 / d[r]
    V = 1.0
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not ray_aabb(lo[node], hi[node], o, inv, np.inf):
            continue
        counters[0] += 1
        if count[node] > 0:
            for k in range(start[node], start[node] + count[node]):
                i = order[k]
                counters[1] += 1
                if not proxy_hit(bottom, M[i], mu[i], o, d, oc, dc, binv, bstack):
                    continue
                t, q = max_response(mu[i], P[i], o, d)
                if t <= tmin or q > CLIP_SQ:
                    continue
                a = opac[i] * math.exp(-0.5 * q)
                if a < alpha_min:
                    continue
                V *= 1.0 - a
                if V < t_stop:
                    return V
        else:
            stack[sp] = left[node]
            stack[sp + 1] = right[node]
            sp += 2
    return V


@jit
def _scratch():
    return np.empty(STACK_SIZE, dtype=np.int64), np.empty(32, dtype=np.int64), np.empty((4, 3))


@jit
def visibility_kernel(start_i, end_i, scene, top, bottom, origins, dirs, tmin, alpha_min, t_stop, out, counters):
    stack, bstack, tmp = _scratch()
    for k in range(start_i, end_i):
        out[k] = trace_visibility(scene, top, bottom, origins[k], dirs[k], tmin, alpha_min, t_stop,
                                  stack, bstack, tmp, counters[k])


@jit
def gather_hits(scene, top, bottom, o, d, tmin, alpha_min, stack, bstack, tmp, hit_t, hit_i, hit_a):
    """Collect all qualifying max-response hits; returns their count."""
    mu, P, opac, nax, M = scene
    lo, hi, left, right, start, count, order = top
    inv = tmp[0]
    oc = tmp[1]
    dc = tmp[2]
    binv = tmp[3]
    for r in range(3):
        inv[r] = 1.0 / d[r]
    nh = 0
    sp = 0
    stack[sp] = 0
    sp += 1
    while sp > 0:
        sp -= 1
        node = stack[sp]
        if not ray_aabb(lo[node], hi[node], o, inv, np.inf):
            continue
        if count[node] > 0:
            for k in range(start[node], start[node] + count[node]):
                i = order[k]
                if not proxy_hit(bottom, M[i], mu[i], o, d, oc, dc, binv, bstack):
                    continue
                t, q = max_response(mu[i], P[i], o, d)
                if t <= tmin or q > CLIP_SQ:
                    continue
                a = opac[i] * math.exp(-0.5 * q)
                if a < alpha_min:
                    continue
                hit_t[nh] = t
                hit_i[nh] = i
                hit_a[nh] = a
                nh += 1
        else:
            stack[sp] = left[node]
            stack[sp + 1] = right[node]
            sp += 2
    return nh


@jit
def sort_hits(nh, hit_t, hit_i):
    """Permutation ordering hits by (t, gaussian index)."""
    by_idx = np.argsort(hit_i[:nh], kind="mergesort")
    t_sorted = hit_t[:nh][by_idx]
    perm = np.argsort(t_sorted, kind="mergesort")
    return by_idx[perm]


@jit
def composite(nh, order, hit_a, weights, t_stop):
    """Front-to-back blending weights; returns (used count, accumulated alpha)."""
    T = 1.0
    used = 0
    for k in range(nh):
        j = order[k]
        w = hit_a[j] * T
        weights[k] = w
        T *= 1.0 - hit_a[j]
        used = k + 1
        if T < t_stop:
            break
    return used, 1.0 - T


@jit
def surface_kernel(start_i, end_i, scene, top, bottom, attrs, origins, dirs, t_near, alpha_min, t_stop,
                   out_t, out_n, out_attr, out_alpha):
    """Sorted alpha-blended surface query: expected depth, blended normal, raw blended attributes."""
    mu, P, opac, nax, M = scene
    n = mu.shape[0]
    stack, bstack, tmp = _scratch()
    hit_t = np.empty(n)
    hit_i = np.empty(n, dtype=np.int64)
    hit_a = np.empty(n)
    weights = np.empty(n)
    K = attrs.shape[1]
    for k in range(start_i, end_i):
        o = origins[k]
        d = dirs[k]
        nh = gather_hits(scene, top, bottom, o, d, t_near, alpha_min, stack, bstack, tmp, hit_t, hit_i, hit_a)
        order = sort_hits(nh, hit_t, hit_i)
        used, acc = composite(nh, order, hit_a, weights, t_stop)
        wsum = 0.0
        tsum = 0.0
        nx = 0.0
        ny = 0.0
        nz = 0.0
        for c in range(K):
            out_attr[k, c] = 0.0
        for m in range(used):
            j = order[m]
            i = hit_i[j]
            w = weights[m]
            wsum += w
            tsum += w * hit_t[j]
            s = 1.0 if (nax[i, 0] * d[0] + nax[i, 1] * d[1] + nax[i, 2] * d[2]) <= 0.0 else -1.0
            nx += w * s * nax[i, 0]
            ny += w * s * nax[i, 1]
            nz += w * s * nax[i, 2]
            for c in range(K):
                out_attr[k, c] += w * attrs[i, c]
        out_alpha[k] = acc
        out_t[k] = tsum / wsum if wsum > 0 else 0.0
        ln = math.sqrt(nx * nx + ny * ny + nz * nz)
        if ln > 0:
            out_n[k, 0] = nx / ln
            out_n[k, 1] = ny / ln
            out_n[k, 2] = nz / ln
        else:
            out_n[k, 0] = 0.0
            out_n[k, 1] = 0.0
            out_n[k, 2] = 0.0


# --------------------------------------------------------------------------- rasterizer

@jit
def raster_kernel(start_i, end_i, pixels, origins, dirs, pix_tile, tile_ptr, tile_idx, mu, P, opac, nax,
                  attrs, t_near, alpha_min, t_stop, max_cand,
                  out_t, out_n, out_attr, out_alpha, out_count, rec_ptr, rec_idx, rec_w, rec_t, record):
    """Per-pixel exact-sort compositing over tile candidates.

    ``record`` = 1 writes each pixel's contributions at ``rec_ptr[k]``.
    """
    hit_t = np.empty(max_cand)
    hit_i = np.empty(max_cand, dtype=np.int64)
    hit_a = np.empty(max_cand)
    weights = np.empty(max_cand)
    K = attrs.shape[1]
    for k in range(start_i, end_i):
        o = origins[k]
        d = dirs[k]
        tile = pix_tile[pixels[k]]
        nh = 0
        for c in range(tile_ptr[tile], tile_ptr[tile + 1]):
            i = tile_idx[c]
            t, q = max_response(mu[i], P[i], o, d)
            if t <= t_near or q > CLIP_SQ:
                continue
            a = opac[i] * math.exp(-0.5 * q)
            if a < alpha_min:
                continue
            hit_t[nh] = t
            hit_i[nh] = i
            hit_a[nh] = a
            nh += 1
        order = sort_hits(nh, hit_t, hit_i)
        used, acc = composite(nh, order, hit_a, weights, t_stop)
        wsum = 0.0
        tsum = 0.0
        nx = 0.0
        ny = 0.0
        nz = 0.0
        for c in range(K):
            out_attr[k, c] = 0.0
        for m in range(used):
            j = order[m]
            i = hit_i[j]
            w = weights[m]
            wsum += w
            tsum += w * hit_t[j]
            s = 1.0 if (nax[i, 0] * d[0] + nax[i, 1] * d[1] + nax[i, 2] * d[2]) <= 0.0 else -1.0
            nx += w * s * nax[i, 0]
            ny += w * s * nax[i, 1]
            nz += w * s * nax[i, 2]
            for c in range(K):
                out_attr[k, c] += w * attrs[i, c]
            if record == 1:
                r = rec_ptr[k] + m
                rec_idx[r] = i
                rec_w[r] = w
                rec_t[r] = hit_t[j]
        out_count[k] = used
        out_alpha[k] = acc
        out_t[k] = tsum / wsum if wsum > 0 else 0.0
        ln = math.sqrt(nx * nx + ny * ny + nz * nz)
        if ln > 0:
            out_n[k, 0] = nx / ln
            out_n[k, 1] = ny / ln
            out_n[k, 2] = nz / ln
        else:
            out_n[k, 0] = 0.0
            out_n[k, 1] = 0.0
            out_n[k, 2] = 0.0


# --------------------------------------------------------------------------- shading

@jit
def env_lookup(env, d, out):
    """Bilinear equirectangular lookup (same convention as envmap.bilinear_lookup)."""
    H = env.shape[0]
    W = env.shape[1]
    ln = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
    y = min(1.0, max(-1.0, d[1] / ln))
    theta = math.acos(y)
    phi = math.atan2(d[2], d[0])
    x = (phi + math.pi) / (2.0 * math.pi) * W - 0.5
    v = min(max(theta / math.pi * H - 0.5, 0.0), H - 1.0)
    x0f = math.floor(x)
    y0f = math.floor(v)
    fx = x - x0f
    fy = v - y0f
    x0 = int(x0f) % W
    x1 = (x0 + 1) % W
    y0 = int(y0f)
    y1 = min(y0 + 1, H - 1)
    for c in range(3):
        top = env[y0, x0, c] * (1.0 - fx) + env[y0, x1, c] * fx
        bot = env[y1, x0, c] * (1.0 - fx) + env[y1, x1, c] * fx
        out[c] = max(top * (1.0 - fy) + bot * fy, 0.0)


@jit
def fresnel_schlick(cos_t, f0):
    m = min(max(1.0 - cos_t, 0.0), 1.0)
    m2 = m * m
    return f0 + (1.0 - f0) * m2 * m2 * m


@jit
def ggx_alpha(roughness):
    return max(roughness * roughness, 1e-4)


@jit
def ggx_d(nh, alpha):
    a2 = alpha * alpha
    k = nh * nh * (a2 - 1.0) + 1.0
    return a2 / (math.pi * k * k)


@jit
def smith_g1(x, k):
    return x / (x * (1.0 - k) + k)


@jit
def smith_g(nl, nv, alpha):
    k = 0.5 * alpha
    return smith_g1(nl, k) * smith_g1(nv, k)


@jit
def ggx_sample_half(t, s, n, alpha, u1, u2, out):
    tan2 = alpha * alpha * u1 / max(1.0 - u1, 1e-300)
    cos_t = 1.0 / math.sqrt(1.0 + tan2)
    sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
    phi = 2.0 * math.pi * u2
    local_to_world(t, s, n, sin_t * math.cos(phi), sin_t * math.sin(phi), cos_t, out)


@jit
def specular_weight(n, wo, h, wi, alpha, f0):
    """f * cos / pdf for a GGX half-vector sample; zero below the horizon."""
    nl = dot3(n, wi)
    nv = dot3(n, wo)
    nh = dot3(n, h)
    vh = dot3(wo, h)
    if nl <= 0.0 or nv <= 0.0 or nh <= 0.0 or vh <= 0.0:
        return 0.0
    return fresnel_schlick(vh, f0) * smith_g(nl, nv, alpha) * vh / (nv * nh)


@jit
def ao_point(scene, top, bottom, x, n, eps, spp, stream, alpha_min, t_stop, use_vis,
             stack, bstack, tmp, o, w, counters):
    t, s = onb(n)
    for r in range(3):
        o[r] = x[r] + eps * n[r]
    acc = 0.0
    for k in range(spp):
        cosine_sample(t, s, n, rand01(stream, 2 * k), rand01(stream, 2 * k + 1), w)
        if use_vis:
            acc += trace_visibility(scene, top, bottom, o, w, 0.0, alpha_min, t_stop, stack, bstack, tmp, counters)
        else:
            acc += 1.0
    return min(max(acc / spp, 0.0), 1.0)


@jit
def diffuse_point(scene, top, bottom, env, x, n, eps, spp, stream, f0, alpha_min, t_stop, use_vis,
                  fresnel_weighted, stack, bstack, tmp, o, w, L, out, counters):
    """Cosine-sampled (1/pi) int (1 - F) V L cos; the pdf cancels cos/pi."""
    t, s = onb(n)
    for r in range(3):
        o[r] = x[r] + eps * n[r]
        out[r] = 0.0
    for k in range(spp):
        cosine_sample(t, s, n, rand01(stream, 2 * k), rand01(stream, 2 * k + 1), w)
        V = 1.0
        if use_vis:
            V = trace_visibility(scene, top, bottom, o, w, 0.0, alpha_min, t_stop, stack, bstack, tmp, counters)
        if V <= 0.0:
            continue
        f = 1.0
        if fresnel_weighted:
            f = 1.0 - fresnel_schlick(dot3(n, w), f0)
        env_lookup(env, w, L)
        for c in range(3):
            out[c] += f * V * L[c]
    for c in range(3):
        out[c] /= spp


@jit
def specular_point(scene, top, bottom, env, x, n, wo, roughness, eps, spp, stream, f0, alpha_min, t_stop,
                   use_vis, stack, bstack, tmp, o, h, w, L, out, counters):
    for c in range(3):
        out[c] = 0.0
    nv = dot3(n, wo)
    if nv <= 1e-4:
        return
    alpha = ggx_alpha(roughness)
    t, s = onb(n)
    for r in range(3):
        o[r] = x[r] + eps * n[r]
    for k in range(spp):
        ggx_sample_half(t, s, n, alpha, rand01(stream, 2 * k), rand01(stream, 2 * k + 1), h)
        vh = dot3(wo, h)
        for r in range(3):
            w[r] = 2.0 * vh * h[r] - wo[r]
        wt = specular_weight(n, wo, h, w, alpha, f0)
        if wt <= 0.0:
            continue
        V = 1.0
        if use_vis:
            V = trace_visibility(scene, top, bottom, o, w, 0.0, alpha_min, t_stop, stack, bstack, tmp, counters)
        if V <= 0.0:
            continue
        env_lookup(env, w, L)
        for c in range(3):
            out[c] += wt * V * L[c]
    for c in range(3):
        out[c] /= spp


@jit
def ao_kernel(start_i, end_i, scene, top, bottom, xs, ns, eps, spp, streams, alpha_min, t_stop, use_vis, out):
    stack, bstack, tmp = _scratch()
    o = np.empty(3)
    w = np.empty(3)
    counters = np.zeros(2, dtype=np.int64)
    for k in range(start_i, end_i):
        out[k] = ao_point(scene, top, bottom, xs[k], ns[k], eps, spp, streams[k], alpha_min, t_stop, use_vis,
                          stack, bstack, tmp, o, w, counters)


@jit
def diffuse_kernel(start_i, end_i, scene, top, bottom, env, xs, ns, eps, spp, streams, f0, alpha_min, t_stop,
                   use_vis, fresnel_weighted, out):
    stack, bstack, tmp = _scratch()
    o = np.empty(3)
    w = np.empty(3)
    L = np.empty(3)
    counters = np.zeros(2, dtype=np.int64)
    for k in range(start_i, end_i):
        diffuse_point(scene, top, bottom, env, xs[k], ns[k], eps, spp, streams[k], f0, alpha_min, t_stop,
                      use_vis, fresnel_weighted, stack, bstack, tmp, o, w, L, out[k], counters)


@jit
def specular_kernel(start_i, end_i, scene, top, bottom, env, xs, ns, wos, rough, eps, spp, streams, f0,
                    alpha_min, t_stop, use_vis, out):
    stack, bstack, tmp = _scratch()
    o = np.empty(3)
    h = np.empty(3)
    w = np.empty(3)
    L = np.empty(3)
    counters = np.zeros(2, dtype=np.int64)
    for k in range(start_i, end_i):
        specular_point(scene, top, bottom, env, xs[k], ns[k], wos[k], rough[k], eps, spp, streams[k], f0,
                       alpha_min, t_stop, use_vis, stack, bstack, tmp, o, h, w, L, out[k], counters)
