"""Relighting the same Gaussians under a rotating environment.

Renders a blob over a ground plane with both paths: deferred split-sum
shading (no shadows) and the ray-traced offline path (with contact
shadows), for a few rotations of the sky.

    python demos/03_relight.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from relightgs.bake import reparameterize
from relightgs.relight import prefilter_env, render_deferred, render_offline, save_rendering
from relightgs.rt import build_bvh
from relightgs.synth import blob_over_ground, sky_environment

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

scene = blob_over_ground(width=96, height=72)
frame = reparameterize(scene.frame)
bvh = build_bvh(frame)
cam = scene.cameras[0]
sky = sky_environment()

for quarter in range(4):
    env = sky.rotated(quarter * np.pi / 2)
    pre = prefilter_env(env, samples=1024)
    deferred = render_deferred(frame, cam, pre)
    offline = render_offline(frame, bvh, cam, env, spp=32)
    save_rendering(deferred, out / f"deferred_rot{quarter * 90:03d}.png")
    save_rendering(offline, out / f"offline_rot{quarter * 90:03d}.png")
    fg = deferred.foreground & offline.foreground
    ratio = offline.linear[fg].mean() / deferred.linear[fg].mean()
    print(f"sky rotated {quarter * 90:3d} deg: offline / deferred mean radiance {ratio:.3f}")
