"""Geometry refinement of Gaussian frames by monotone gradient descent.

The total energy is

    E = lam_color * E_color + lam_smooth * E_smooth + lam_temp * E_temp + lam_normal * E_normal

E_color and E_normal are rendered (see ``energy``). E_smooth and E_temp are
simple stand-ins for the motion-tracking terms of a full performance
capture system: local rigidity of k-nearest-neighbour offsets relative to
the frame as it was when refinement started, and the squared change of
every attribute since the previous frame.

The descent uses a fixed step per parameter class, scaled by a global
factor that halves whenever a trial step would increase the energy and
grows by 1.25 (capped at 1024) after each accepted step. Accepted energies are
therefore non-increasing; a factor below 1e-12 stops the frame and flags
divergence.
"""

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .config import Config
from .energy import FD_STEPS, RenderedEnergy
from .scene import GaussianSequence, axis_angle_to_quat, quat_multiply, quat_to_rotmat

MIN_FACTOR = 1e-12
MAX_FACTOR = 1024.0
PARAMS = ("pos", "rot", "scale", "color")
LOG_FIELDS = ("phase", "iteration", "E_color", "E_smooth", "E_temp", "E_normal", "E_total", "step")


# --------------------------------------------------------------------------- stand-in terms

@dataclass(eq=False)
class Anchor:
    """Reference positions, rotations and neighbour lists for the rigidity term."""

    means: np.ndarray
    rotations: np.ndarray
    neighbours: np.ndarray   # (N, k)
    weights: np.ndarray      # (N, k)

    @classmethod
    def from_frame(cls, frame, k=8):
        n = len(frame)
        k = min(k, n - 1)
        if k <= 0:
            return cls(np.array(frame.means), frame.rotations().copy(), np.zeros((n, 0), dtype=np.int64),
                       np.zeros((n, 0)))
        _, nb = cKDTree(frame.means).query(frame.means, k=k + 1)
        nb = nb[:, 1:]
        return cls(np.array(frame.means), frame.rotations().copy(), nb, np.full(nb.shape, 1.0 / k))


def _smooth_terms(means, R, anchor):
    """Per-Gaussian rigidity residual sums and the residual vectors."""
    if anchor.neighbours.shape[1] == 0:
        return np.zeros(len(means)), np.zeros((len(means), 0, 3))
    rel = np.einsum("nij,nkj->nik", R, anchor.rotations)   # R_i Rhat_i^T
    ref = anchor.means[:, None, :] - anchor.means[anchor.neighbours]
    cur = means[:, None, :] - means[anchor.neighbours]
    res = cur - np.einsum("nij,nkj->nki", rel, ref)
    per = np.einsum("nk,nkc,nkc->n", anchor.weights, res, res)
    return per, res


def smooth_energy(frame, anchor, grad=False, quats=None):
    """Local rigidity of neighbour offsets with respect to ``anchor``.

    Returns the energy, and with ``grad`` the gradients with respect to
    positions (analytic) and left-applied rotation vectors (vectorised
    central differences; each term depends on a single rotation).
    """
    q = frame.quats if quats is None else quats
    R = quat_to_rotmat(q)
    per, res = _smooth_terms(frame.means, R, anchor)
    e = float(per.sum())
    if not grad:
        return e
    g_pos = np.zeros((len(frame), 3))
    if res.shape[1]:
        wr = 2.0 * anchor.weights[..., None] * res
        g_pos += wr.sum(axis=1)
        np.add.at(g_pos, anchor.neighbours.ravel(), -wr.reshape(-1, 3))
    g_rot = np.zeros((len(frame), 3))
    h = FD_STEPS["rot"]
    for k in range(3):
        e_k = np.zeros(3)
        e_k[k] = h
        qp = quat_multiply(axis_angle_to_quat(e_k)[None], q)
        qm = quat_multiply(axis_angle_to_quat(-e_k)[None], q)
        pp, _ = _smooth_terms(frame.means, quat_to_rotmat(qp), anchor)
        pm, _ = _smooth_terms(frame.means, quat_to_rotmat(qm), anchor)
        g_rot[:, k] = (pp - pm) / (2 * h)
    return e, g_pos, g_rot


def _attr_vector(frame):
    parts = [frame.means, frame.quats, frame.scales, frame.opacities[:, None]]
    if frame.has_sh:
        parts.append(frame.sh.reshape(len(frame), -1))
    return np.concatenate(parts, axis=1)


def temporal_energy(frame, prev, grad=False):
    """Sum of squared attribute changes since ``prev`` (0 without a previous frame)."""
    if prev is None:
        e = 0.0
        if not grad:
            return e
        z = np.zeros((len(frame), 3))
        return e, {"pos": z, "rot": z.copy(), "scale": z.copy(), "color": z.copy()}
    d = _attr_vector(frame) - _attr_vector(prev)
    e = float(np.sum(d * d))
    if not grad:
        return e
    g = {"pos": 2.0 * (frame.means - prev.means), "scale": 2.0 * (frame.scales - prev.scales)}
    g["color"] = 2.0 * (frame.sh[:, 0, :] - prev.sh[:, 0, :]) if frame.has_sh and prev.has_sh else np.zeros((len(frame), 3))
    h = FD_STEPS["rot"]
    g_rot = np.zeros((len(frame), 3))
    for k in range(3):
        e_k = np.zeros(3)
        e_k[k] = h
        qp = quat_multiply(axis_angle_to_quat(e_k)[None], frame.quats)
        qm = quat_multiply(axis_angle_to_quat(-e_k)[None], frame.quats)
        dp = np.sum((qp - prev.quats) ** 2, axis=1)
        dm = np.sum((qm - prev.quats) ** 2, axis=1)
        g_rot[:, k] = (dp - dm) / (2 * h)
    g["rot"] = g_rot
    return e, g


# --------------------------------------------------------------------------- total energy

@dataclass(eq=False)
class EnergyResult:
    total: float
    terms: dict
    grads: dict | None = None


def energy(frame, views, config=None, prev_frame=None, anchor=None, photos=None, masks=None, grad=True,
           params=PARAMS, lambda_normal=None, threads=None):
    """Total weighted energy, its per-term breakdown and optionally gradients."""
    config = config or Config()
    views = list(views)
    if not views:
        raise ValueError("energy needs at least one view")
    lam_n = config.lambda_normal if lambda_normal is None else float(lambda_normal)
    anchor = anchor if anchor is not None else Anchor.from_frame(frame, config.knn)
    rend = RenderedEnergy(frame, views, photos, masks, config.lambda_color, lam_n, threads)
    vals = rend.values()
    terms = {"color": vals["color"], "normal": vals["normal"]}
    sm = smooth_energy(frame, anchor, grad=grad)
    tp = temporal_energy(frame, prev_frame, grad=grad)
    terms["smooth"] = sm[0] if grad else sm
    terms["temp"] = tp[0] if grad else tp
    total = (config.lambda_color * terms["color"] + config.lambda_smooth * terms["smooth"]
             + config.lambda_temp * terms["temp"] + lam_n * terms["normal"])
    if not grad:
        return EnergyResult(total, terms)
    g = rend.gradients(params) if (config.lambda_color > 0 or lam_n > 0) else {p: np.zeros((len(frame), 3))
                                                                                 for p in params}
    _, gs_pos, gs_rot = sm
    _, gt = tp
    out = {}
    for p in params:
        gp = g[p].copy()
        if p == "pos":
            gp += config.lambda_smooth * gs_pos
        if p == "rot":
            gp += config.lambda_smooth * gs_rot
        gp += config.lambda_temp * gt[p]
        out[p] = gp
    return EnergyResult(total, terms, out)


def check_gradients(frame, views, config=None, coords=10, seed=0, prev_frame=None, rtol=1e-2, threads=None):
    """Compare optimiser gradients with centred differences of the full energy.

    Returns a list of (param, gaussian, axis, optimiser value, reference, ok).
    """
    config = config or Config()
    anchor = Anchor.from_frame(frame, config.knn)
    res = energy(frame, views, config, prev_frame, anchor, threads=threads)
    rng = np.random.default_rng(seed)
    avail = [p for p in PARAMS if not (p == "color" and not frame.has_sh)]
    out = []
    for _ in range(coords):
        p = avail[rng.integers(len(avail))]
        i = int(rng.integers(len(frame)))
        k = int(rng.integers(3))
        h = FD_STEPS[p] * (frame.scales[i, k] if p == "scale" else 1.0)
        e_plus = energy(_perturb(frame, p, i, k, h), views, config, prev_frame, anchor, grad=False,
                        threads=threads).total
        e_minus = energy(_perturb(frame, p, i, k, -h), views, config, prev_frame, anchor, grad=False,
                         threads=threads).total
        ref = (e_plus - e_minus) / (2 * h)
        val = float(res.grads[p][i, k])
        ok = abs(val - ref) <= rtol * max(abs(ref), abs(val), 1e-8)
        out.append((p, i, k, val, ref, ok))
    return out


def _perturb(frame, p, i, k, h):
    if p == "pos":
        m = np.array(frame.means)
        m[i, k] += h
        return frame.replace(means=m)
    if p == "rot":
        q = np.array(frame.quats)
        e = np.zeros(3)
        e[k] = h
        q[i] = quat_multiply(axis_angle_to_quat(e), q[i])
        return frame.replace(quats=q)
    if p == "scale":
        s = np.array(frame.scales)
        s[i, k] += h
        return frame.replace(scales=s)
    sh = np.array(frame.sh)
    sh[i, 0, k] += h
    return frame.replace(sh=sh)


# --------------------------------------------------------------------------- optimiser

def _step_frame(frame, grads, steps, factor):
    kw = {}
    if "pos" in grads:
        kw["means"] = frame.means - factor * steps["pos"] * grads["pos"]
    if "rot" in grads:
        dq = axis_angle_to_quat(-factor * steps["rot"] * grads["rot"])
        q = quat_multiply(dq, frame.quats)
        kw["quats"] = q / np.linalg.norm(q, axis=1, keepdims=True)
    if "scale" in grads:
        # descent in log-scale keeps scales positive
        s = frame.scales
        kw["scales"] = s * np.exp(-factor * steps["scale"] * s * grads["scale"])
    if "color" in grads and frame.has_sh:
        sh = np.array(frame.sh)
        sh[:, 0, :] -= factor * steps["color"] * grads["color"]
        kw["sh"] = sh
    return frame.replace(**kw)


@dataclass(eq=False)
class FrameLog:
    rows: list = field(default_factory=list)
    diverged: bool = False
    phase_starts: dict = field(default_factory=dict)


def _descend(frame, views, config, prev, anchor, iters, lam_n, params, phase, log, photos, masks, threads):
    steps = {"pos": config.step_pos, "rot": config.step_rot, "scale": config.step_scale, "color": config.step_color}
    factor = 1.0
    cur = energy(frame, views, config, prev, anchor, photos, masks, True, params, lam_n, threads)
    log.phase_starts[phase] = cur.total
    log.rows.append(_row(phase, 0, cur, lam_n, factor))
    it = 0
    while it < iters:
        trial = _step_frame(frame, cur.grads, steps, factor)
        e_new = energy(trial, views, config, prev, anchor, photos, masks, False, params, lam_n, threads)
        if e_new.total > cur.total:
            factor *= 0.5
            if factor < MIN_FACTOR:
                log.diverged = True
                break
            continue
        it += 1
        frame = trial
        cur = energy(frame, views, config, prev, anchor, photos, masks, True, params, lam_n, threads)
        assert cur.total <= log.rows[-1][6] + 1e-12 * max(1.0, abs(log.rows[-1][6])), "energy increased"
        log.rows.append(_row(phase, it, cur, lam_n, factor))
        factor = min(MAX_FACTOR, factor * 1.25)
    return frame


def _row(phase, it, res, lam_n, factor):
    t = res.terms
    return (phase, it, t["color"], t["smooth"], t["temp"], t["normal"], res.total, factor)


def refine_frame(frame, views, config=None, prev_frame=None, photos=None, masks=None, params=PARAMS,
                 appearance_iters=None, normal_iters=None, threads=None):
    """Two-phase refinement of one frame; returns (frame, FrameLog).

    Phase 1 runs without the normal term, phase 2 with it. Zero iterations
    return the input frame object unchanged.
    """
    config = config or Config()
    a_it = config.appearance_iters if appearance_iters is None else int(appearance_iters)
    n_it = config.normal_iters if normal_iters is None else int(normal_iters)
    log = FrameLog()
    if a_it == 0 and n_it == 0:
        return frame, log
    params = tuple(p for p in params if not (p == "color" and not frame.has_sh))
    anchor = Anchor.from_frame(frame, config.knn)
    if a_it > 0:
        frame = _descend(frame, views, config, prev_frame, anchor, a_it, 0.0, params, 1, log, photos, masks,
                         threads)
    if n_it > 0 and not log.diverged:
        frame = _descend(frame, views, config, prev_frame, anchor, n_it, config.lambda_normal, params, 2, log,
                         photos, masks, threads)
    return frame, log


def refine_sequence(sequence, views, config=None, params=PARAMS, appearance_iters=None, normal_iters=None,
                    threads=None):
    """Refine every frame in order; frame t is regularised towards refined frame t-1.

    ``views`` is a camera list shared by all frames or one list per frame.
    """
    frames = list(sequence)
    out, logs = [], []
    prev = None
    for t, f in enumerate(frames):
        vt = views[t] if views and isinstance(views[0], (list, tuple)) else views
        g, log = refine_frame(f, vt, config, prev, params=params, appearance_iters=appearance_iters,
                              normal_iters=normal_iters, threads=threads)
        out.append(g)
        logs.append(log)
        prev = g
    return GaussianSequence(out), logs


def write_energy_log(log, path, frame_index=None):
    """CSV energy log: one row per accepted iteration (iteration 0 is the start of a phase)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = (["frame"] if frame_index is not None else []) + list(LOG_FIELDS)
        w.writerow(head)
        for row in log.rows:
            w.writerow(([frame_index] if frame_index is not None else []) + [repr(v) if isinstance(v, float) else v
                                                                              for v in row])
        if log.diverged:
            w.writerow(["# diverged: step underflow"])
