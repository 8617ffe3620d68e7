import numpy as np
import pytest

from relightgs.bake import reparameterize
from relightgs.config import Config
from relightgs.envmap import EnvironmentMap
from relightgs.metrics import psnr
from relightgs.raster import rasterize
from relightgs.relight import prefilter_env, render_deferred, render_offline, tone_map
from relightgs.rt import build_bvh
from relightgs.scene import SceneError
from relightgs.synth import blob_over_ground, sky_environment, sphere_shell


@pytest.fixture(scope="module")
def sky():
    env = sky_environment()
    return env, prefilter_env(env)


def white_sphere(width=32, height=24, rho=1.0, ao=1.0, roughness=1.0):
    sc = sphere_shell(radius=0.5, spacing=0.05, views=1, width=width, height=height, thickness_layers=2,
                      base_color=(rho, rho, rho), roughness=roughness)
    n = len(sc.frame)
    f = reparameterize(sc.frame).replace(ao=np.full(n, float(ao)))
    return f, sc.cameras[0]


class TestPrefilter:
    def test_constant_env_irradiance(self):
        pre = prefilter_env(EnvironmentMap.constant([0.5, 1.0, 2.0], 16, 32), samples=1024, specular_samples=128)
        np.testing.assert_allclose(pre.irradiance, np.broadcast_to([0.5, 1.0, 2.0], pre.irradiance.shape),
                                   rtol=1e-2)
        for level in pre.specular:
            np.testing.assert_allclose(level, np.broadcast_to([0.5, 1.0, 2.0], level.shape), rtol=1e-2)

    def test_black_env(self):
        pre = prefilter_env(EnvironmentMap.constant(0.0, 16, 32), samples=256, specular_samples=64)
        assert not pre.irradiance.any() and not pre.irradiance_fresnel.any()
        assert not any(level.any() for level in pre.specular)

    def test_level_zero_is_downsampled_source(self, sky):
        env, pre = sky
        np.testing.assert_array_equal(pre.specular[0], env.downsample(32, 64).data)

    def test_entries_nonnegative(self, sky):
        _, pre = sky
        assert (pre.irradiance >= 0).all() and (pre.irradiance_fresnel >= 0).all()
        assert all((level >= 0).all() for level in pre.specular) and (pre.brdf >= 0).all()

    def test_rotation_shifts_columns(self, sky):
        env, pre = sky
        rot = prefilter_env(env.rotated(2 * np.pi * 2 / env.width))
        # two source texels are one irradiance texel (32 columns) and two specular texels (64 columns)
        np.testing.assert_allclose(rot.irradiance, np.roll(pre.irradiance, 1, axis=1), atol=1e-10)
        np.testing.assert_allclose(rot.specular[2], np.roll(pre.specular[2], 2, axis=1), atol=1e-10)

    def test_brdf_table_bounded(self, sky):
        _, pre = sky
        total = pre.brdf.sum(axis=-1)
        assert total.max() <= 1.0 + 1e-9
        # smooth surfaces at normal incidence reflect almost everything the split sum allows
        assert total[-1, 0] > 0.9


class TestToneMap:
    def test_values(self):
        np.testing.assert_array_equal(tone_map(np.array([1.0, 0.0, 0.18])), [255, 0, 118])
        np.testing.assert_array_equal(tone_map(np.array([0.5]), exposure=2.0), [255])
        np.testing.assert_array_equal(tone_map(np.array([-1.0, 7.0])), [0, 255])

    def test_exposure_positive(self):
        with pytest.raises(ValueError):
            tone_map(np.ones(3), exposure=0.0)


class TestDeferred:
    def test_constant_env_diffuse_is_radiance(self):
        f, cam = white_sphere()
        pre = prefilter_env(EnvironmentMap.constant(0.6, 16, 32), samples=1024, specular_samples=64)
        r = render_deferred(f, cam, pre, config=Config(specular=False))
        assert r.foreground.sum() > 100
        np.testing.assert_allclose(r.linear[r.foreground], 0.6, rtol=1e-2)

    def test_black_base_color_shows_only_specular(self):
        f, cam = white_sphere(rho=0.0, roughness=0.3)
        pre = prefilter_env(EnvironmentMap.constant(1.0, 16, 32), samples=1024, specular_samples=64)
        on = render_deferred(f, cam, pre)
        off = render_deferred(f, cam, pre, config=Config(specular=False))
        fg = on.foreground
        assert not off.linear[fg].any()
        # Schlick reflectance of a dielectric: at least F0 = 0.04, at most 1
        assert (on.linear[fg] > 0.03).all() and (on.linear[fg] <= 1.0).all()

    def test_black_env(self):
        f, cam = white_sphere()
        pre = prefilter_env(EnvironmentMap.constant(0.0, 16, 32), samples=256, specular_samples=64)
        r = render_deferred(f, cam, pre)
        assert not r.linear.any() and not r.image.any()

    def test_zero_ao_black_foreground(self, sky):
        _, pre = sky
        f, cam = white_sphere(ao=0.0)
        r = render_deferred(f, cam, pre, config=Config(specular=False))
        assert not r.linear[r.foreground].any()
        assert r.linear[~r.foreground].any()

    def test_background_is_env(self, sky):
        env, pre = sky
        f, cam = white_sphere()
        r = render_deferred(f, cam, pre)
        _, d = cam.pixel_rays()
        np.testing.assert_array_equal(r.linear[~r.foreground], env.query(d).reshape(r.linear.shape)[~r.foreground])

    def test_strict_mode(self, sky):
        _, pre = sky
        sc = sphere_shell(views=1, width=16, height=12)
        with pytest.raises(SceneError):
            render_deferred(sc.frame, sc.cameras[0], pre)
        render_deferred(sc.frame, sc.cameras[0], pre, strict=False)
        with pytest.raises(SceneError):
            render_deferred(sc.frame.replace(base_color=None, roughness=None, ao=None), sc.cameras[0], pre,
                            strict=False)

    def test_deterministic(self, sky):
        _, pre = sky
        f, cam = white_sphere(rho=0.4, roughness=0.3)
        a = render_deferred(f, cam, pre, threads=1)
        b = render_deferred(f, cam, pre, threads=2)
        np.testing.assert_array_equal(a.linear, b.linear)


class TestOffline:
    def test_white_furnace(self):
        f, cam = white_sphere()
        env = EnvironmentMap.constant(0.8, 16, 32)
        cfg = Config(specular=False)
        off = render_offline(f, None, cam, env, spp=256, config=cfg, use_visibility=False)
        pre = prefilter_env(env, samples=1024, specular_samples=64)
        dfr = render_deferred(f, cam, pre, config=cfg)
        np.testing.assert_allclose(off.linear[off.foreground], 0.8, rtol=2e-2)
        np.testing.assert_allclose(dfr.linear[dfr.foreground], 0.8, rtol=2e-2)

    def test_matches_deferred_on_convex_blob(self, sky):
        env, pre = sky
        f, cam = white_sphere(48, 36, rho=0.6, roughness=0.5)
        d = render_deferred(f, cam, pre)
        o = render_offline(f, build_bvh(f), cam, env, spp=256)
        assert psnr(np.clip(d.linear, 0, 1), np.clip(o.linear, 0, 1)) >= 30.0

    def test_contact_shadow_only_offline(self, sky):
        env, pre = sky
        sc = blob_over_ground(width=48, height=36)
        f = reparameterize(sc.frame)
        cam = sc.cameras[0]
        gb = rasterize(f, cam)
        o, d = cam.pixel_rays()
        x = (o + d * gb.depth.reshape(-1, 1)).reshape(36, 48, 3)
        ground = gb.foreground & (np.abs(x[..., 1]) < 0.03)
        r = np.hypot(x[..., 0], x[..., 2])
        # directly beneath the blob it hides a cone of half-angle asin(0.25 / 0.45) around the zenith,
        # about a third of the cosine-weighted sky
        disk, free = ground & (r < 0.12), ground & (r > 0.6) & (np.abs(x[..., [0, 2]]).max(axis=-1) < 0.9)
        assert disk.sum() >= 5 and free.sum() > 100
        off = render_offline(f, build_bvh(f), cam, env, spp=64).linear.mean(axis=-1)
        dfr = render_deferred(f, cam, pre).linear.mean(axis=-1)
        assert off[disk].mean() < 0.7 * off[free].mean()
        assert dfr[disk].mean() > 0.95 * dfr[free].mean()

    def test_mc_convergence(self):
        f, cam = white_sphere(12, 9, rho=0.7, roughness=0.4)
        env = sky_environment()
        bvh = build_bvh(f)
        ref = render_offline(f, bvh, cam, env, spp=4096, seed=99).linear
        for seed in range(5):
            lo = render_offline(f, bvh, cam, env, spp=1, seed=seed).linear
            hi = render_offline(f, bvh, cam, env, spp=256, seed=seed).linear
            assert np.sqrt(np.mean((lo - ref) ** 2)) > np.sqrt(np.mean((hi - ref) ** 2))

    def test_energy_bound(self, sky):
        env, pre = sky
        f, cam = white_sphere(24, 18, roughness=0.2)
        bound = env.max_radiance() * (1.0 + pre.brdf.sum(axis=-1).max())
        assert render_offline(f, None, cam, env, spp=64).linear.max() <= bound
        assert render_deferred(f, cam, pre).linear.max() <= bound

    def test_deterministic_per_seed(self, sky):
        env, _ = sky
        f, cam = white_sphere(16, 12, rho=0.5)
        a = render_offline(f, None, cam, env, spp=16, seed=3, threads=1)
        b = render_offline(f, None, cam, env, spp=16, seed=3, threads=2)
        c = render_offline(f, None, cam, env, spp=16, seed=4)
        np.testing.assert_array_equal(a.linear, b.linear)
        assert not np.array_equal(a.linear, c.linear)

    def test_indirect_bounce_reserved(self, sky):
        env, _ = sky
        f, cam = white_sphere(8, 6)
        with pytest.raises(NotImplementedError):
            render_offline(f, None, cam, env, spp=1, config=Config(indirect_bounce=True))
