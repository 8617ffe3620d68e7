import numpy as np
import pytest

from relightgs.color import rgb_to_sh_dc
from relightgs.scene import GaussianFrame


def random_frame(n, seed=0, pbr=True, sh=True, extent=1.0, float32=False):
    """Random valid frame; ``float32`` rounds every field to float32 first."""
    rng = np.random.default_rng(seed)
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    kw = dict(means=rng.uniform(-extent, extent, (n, 3)), quats=q, scales=rng.uniform(0.01, 0.1, (n, 3)),
              opacities=rng.uniform(0.05, 1.0, n))
    if sh:
        kw["sh"] = rng.normal(scale=0.2, size=(n, 16, 3))
    if pbr:
        kw.update(base_color=rng.uniform(0, 1, (n, 3)), roughness=rng.uniform(0, 1, n), ao=rng.uniform(0, 1, n))
    if float32:
        kw = {k: np.asarray(v, dtype=np.float32).astype(np.float64) for k, v in kw.items()}
    return GaussianFrame(**kw)


def disc_frame(points, normals, scale=0.03, thin=0.001, opacity=0.95, color=(0.5, 0.5, 0.5)):
    from relightgs.scene import rotmat_to_quat
    from relightgs.synth import frames_from_normals

    points = np.atleast_2d(points)
    n = len(points)
    q = rotmat_to_quat(frames_from_normals(np.atleast_2d(normals)))
    s = np.tile([scale, scale, thin], (n, 1))
    sh = np.zeros((n, 16, 3))
    sh[:, 0] = rgb_to_sh_dc(np.tile(color, (n, 1)))
    return GaussianFrame(points, q, s, np.full(n, opacity), sh=sh, base_color=np.tile(color, (n, 1)),
                         roughness=np.full(n, 0.5), ao=np.ones(n))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
