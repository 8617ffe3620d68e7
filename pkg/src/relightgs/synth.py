"""Parameterised synthetic scenes with known geometry and materials.

Surfaces are tiled with flat, disc-like Gaussians whose thin axis follows
the surface normal, spaced so that a fronto view accumulates alpha above
0.99 in the interior.
"""

from dataclasses import dataclass, field

import numpy as np

from .color import rgb_to_sh_dc
from .envmap import EnvironmentMap
from .scene import GaussianFrame, make_camera, rotmat_to_quat

TANGENT_SCALE = 0.8   # tangential scale in units of the tile spacing
THIN_SCALE = 0.05     # normal-axis scale in units of the tile spacing


@dataclass(eq=False)
class SynthScene:
    frame: GaussianFrame
    cameras: list
    truth: dict = field(default_factory=dict)


def frames_from_normals(normals):
    """Rotation matrices whose third column is the given unit normal."""
    n = np.asarray(normals, dtype=np.float64).reshape(-1, 3)
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    helper = np.where(np.abs(n[:, [1]]) < 0.9, [[0.0, 1.0, 0.0]], [[1.0, 0.0, 0.0]])
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=2)


def surfels(points, normals, spacing, opacity=0.95, base_color=(0.5, 0.5, 0.5), roughness=0.5, ao=1.0,
            with_sh=True, t=0):
    """Disc-shaped Gaussians at ``points`` facing ``normals``."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(p)
    R = frames_from_normals(normals)
    quats = rotmat_to_quat(R)
    spacing = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (n,))
    scales = np.stack([TANGENT_SCALE * spacing, TANGENT_SCALE * spacing, THIN_SCALE * spacing], axis=1)
    rho = np.broadcast_to(np.asarray(base_color, dtype=np.float64), (n, 3)).copy()
    sh = None
    if with_sh:
        sh = np.zeros((n, 16, 3))
        sh[:, 0, :] = rgb_to_sh_dc(rho)
    return GaussianFrame(p, quats, scales, np.full(n, float(opacity)), sh=sh, base_color=rho,
                         roughness=np.broadcast_to(np.asarray(roughness, dtype=np.float64), (n,)).copy(),
                         ao=np.full(n, float(ao)), t=t)


def concat_frames(frames, t=0):
    fs = [f for f in frames if len(f)]
    kw = dict(means=np.concatenate([f.means for f in fs]), quats=np.concatenate([f.quats for f in fs]),
              scales=np.concatenate([f.scales for f in fs]), opacities=np.concatenate([f.opacities for f in fs]),
              t=t)
    if all(f.has_sh for f in fs):
        kw["sh"] = np.concatenate([f.sh for f in fs])
    if all(f.has_pbr for f in fs):
        kw.update(base_color=np.concatenate([f.base_color for f in fs]),
                  roughness=np.concatenate([f.roughness for f in fs]), ao=np.concatenate([f.ao for f in fs]))
    return GaussianFrame(**kw)


# --------------------------------------------------------------------------- primitives

def wall_points(size=1.0, spacing=0.05, center=(0.0, 0.0, 0.0), normal=(0.0, 0.0, -1.0)):
    """Square grid of points on a plane; returns (points, normals)."""
    k = int(round(size / spacing)) + 1
    g = (np.arange(k) - (k - 1) / 2) * spacing
    a, b = np.meshgrid(g, g)
    R = frames_from_normals(normal)[0]
    pts = np.asarray(center, dtype=np.float64) + a.reshape(-1, 1) * R[:, 0] + b.reshape(-1, 1) * R[:, 1]
    return pts, np.broadcast_to(R[:, 2], pts.shape).copy()


def fibonacci_sphere(count):
    i = np.arange(count) + 0.5
    y = 1.0 - 2.0 * i / count
    r = np.sqrt(1.0 - y * y)
    phi = np.pi * (3.0 - np.sqrt(5.0)) * i
    return np.stack([r * np.cos(phi), y, r * np.sin(phi)], axis=1)


def sphere_points(radius=0.5, spacing=0.05, center=(0.0, 0.0, 0.0)):
    count = max(int(np.ceil(4 * np.pi * radius ** 2 / spacing ** 2)), 12)
    d = fibonacci_sphere(count)
    return np.asarray(center) + radius * d, d


# --------------------------------------------------------------------------- cameras

def camera_ring(count, radius, height=0.0, target=(0.0, 0.0, 0.0), width=64, img_height=48, fov_deg=40.0,
                phase=0.0):
    """Cameras evenly spaced on a horizontal circle, all looking at ``target``."""
    cams = []
    target = np.asarray(target, dtype=np.float64)
    for k in range(count):
        a = phase + 2 * np.pi * k / count
        eye = target + np.array([radius * np.sin(a), height, -radius * np.cos(a)])
        cams.append(make_camera(eye, target, width, img_height, fov_deg, name=f"cam{k:02d}"))
    return cams


# --------------------------------------------------------------------------- scenes

def flat_wall(size=1.0, spacing=0.05, depth=2.0, base_color=(0.6, 0.4, 0.3), roughness=0.5, opacity=0.95,
              width=64, height=48, fov_deg=40.0):
    """Fronto-parallel square wall at z = ``depth`` seen from the origin."""
    pts, nrm = wall_points(size, spacing, (0.0, 0.0, depth), (0.0, 0.0, -1.0))
    frame = surfels(pts, nrm, spacing, opacity, base_color, roughness)
    cam = make_camera([0.0, 0.0, 0.0], [0.0, 0.0, depth], width, height, fov_deg, name="front")
    return SynthScene(frame, [cam], {"kind": "wall", "depth": depth, "size": size, "spacing": spacing,
                                     "base_color": np.asarray(base_color, dtype=np.float64)})


def sphere_shell(radius=0.5, spacing=0.05, base_color=(0.6, 0.4, 0.3), roughness=0.5, opacity=0.95, views=8,
                 cam_distance=2.0, width=64, height=48, fov_deg=40.0, thickness_layers=1):
    """Closed spherical shell of surfels; ``thickness_layers`` > 1 stacks inner layers for opacity."""
    parts = []
    for k in range(thickness_layers):
        r = radius - k * 0.5 * spacing
        pts, nrm = sphere_points(r, spacing * r / radius)
        parts.append(surfels(pts, nrm, spacing * r / radius, opacity, base_color, roughness))
    frame = concat_frames(parts)
    cams = camera_ring(views, cam_distance, 0.3 * cam_distance, (0, 0, 0), width, height, fov_deg)
    return SynthScene(frame, cams, {"kind": "sphere", "radius": radius, "center": np.zeros(3),
                                    "base_color": np.asarray(base_color, dtype=np.float64)})


def blob_over_ground(blob_radius=0.25, blob_height=0.45, ground_size=2.0, spacing=0.05, jitter=0.004,
                     blob_color=(0.7, 0.3, 0.2), ground_color=(0.6, 0.6, 0.6), roughness=0.7, seed=0, views=4,
                     width=64, height=48, fov_deg=45.0):
    """Spherical blob floating above a horizontal ground plane (y = 0, facing +Y).

    Ground heights get a small random jitter so an unoffset ray origin sits
    among its own neighbours, as on real reconstructed surfaces.
    """
    rng = np.random.default_rng(seed)
    gp, gn = wall_points(ground_size, spacing, (0.0, 0.0, 0.0), (0.0, 1.0, 0.0))
    gp[:, 1] += rng.uniform(-jitter, jitter, len(gp))
    ground = surfels(gp, gn, spacing, 0.95, ground_color, roughness)
    bp, bn = sphere_points(blob_radius, spacing * 0.6, (0.0, blob_height, 0.0))
    blob = surfels(bp, bn, spacing * 0.6, 0.95, blob_color, roughness)
    frame = concat_frames([ground, blob])
    cams = camera_ring(views, 2.2, 1.6, (0.0, 0.15, 0.0), width, height, fov_deg, phase=0.3)
    return SynthScene(frame, cams, {"kind": "blob_over_ground", "blob_radius": blob_radius,
                                    "blob_center": np.array([0.0, blob_height, 0.0]), "ground_y": 0.0,
                                    "num_ground": len(gp)})


def random_cloud(count=200, extent=1.0, scale_range=(0.02, 0.1), opacity_range=(0.2, 1.0), seed=0):
    """Gaussians with random positions, orientations, scales and opacities."""
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(count, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    rho = rng.uniform(0.1, 0.9, (count, 3))
    sh = np.zeros((count, 16, 3))
    sh[:, 0, :] = rgb_to_sh_dc(rho)
    frame = GaussianFrame(rng.uniform(-extent, extent, (count, 3)), q, rng.uniform(*scale_range, (count, 3)),
                          rng.uniform(*opacity_range, count), sh=sh, base_color=rho,
                          roughness=rng.uniform(0, 1, count), ao=np.ones(count))
    cams = camera_ring(4, 3.0 * extent, 0.5 * extent)
    return SynthScene(frame, cams, {"kind": "cloud", "seed": seed})


def sky_environment(height=32, width=64, sun_dir=(0.4, 0.8, -0.45), sun_power=2.0, sharpness=8.0):
    """Smooth daylight-like map: blue-white sky gradient, grey ground and a broad warm sun lobe."""
    sun = np.asarray(sun_dir, dtype=np.float64)
    sun = sun / np.linalg.norm(sun)

    def fn(d):
        y = d[..., 1:2]
        sky = np.array([0.55, 0.7, 1.0]) * (0.5 + 0.5 * np.clip(y, 0, 1)) + 0.3
        ground = np.array([0.35, 0.33, 0.3])
        base = np.where(y >= 0, sky, ground + (sky - ground) * np.clip(1 + 4 * y, 0, 1))
        lobe = np.exp(sharpness * (d @ sun - 1.0))[..., None]
        return base + sun_power * lobe * np.array([1.0, 0.9, 0.75])

    return EnvironmentMap.from_function(fn, height, width)


SCENES = {"wall": flat_wall, "sphere": sphere_shell, "blob": blob_over_ground, "cloud": random_cloud}
