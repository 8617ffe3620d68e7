import numpy as np
import pytest

from conftest import disc_frame
from relightgs.config import Config
from relightgs.decompose import (BRDFParams, Sampler, decompose_view, estimate_ao, estimate_diffuse_residue,
                                 estimate_specular, load_material_maps, save_material_maps, solve_base_color)
from relightgs.denoise import denoise
from relightgs.envmap import EnvironmentMap, texel_directions
from relightgs.rt import build_bvh
from relightgs.scene import GaussianFrame, make_camera
from relightgs.synth import flat_wall, sphere_shell, wall_points


def half_space_wall(gap=0.05, extent=3.0, spacing=0.05):
    """Opaque wall at x = gap facing -x: blocks (almost) every direction with w_x > 0."""
    ys = np.arange(-extent, extent + 1e-9, spacing)
    zs = np.arange(-0.5, extent + 1e-9, spacing)
    yy, zz = np.meshgrid(ys, zs)
    pts = np.stack([np.full(yy.size, gap), yy.ravel(), zz.ravel()], axis=1)
    return disc_frame(pts, np.tile([-1.0, 0, 0], (len(pts), 1)), scale=spacing, thin=spacing * 0.05,
                      opacity=0.99)


def enclosing_shell(radius=0.3):
    sc = sphere_shell(radius=radius, spacing=0.03, thickness_layers=3, opacity=0.99)
    return sc.frame


def ggx_reference(n, wo, alpha, f0, samples=1_000_000, seed=0):
    """Uniform-hemisphere MC of f_s * cos for a constant unit environment."""
    rng = np.random.default_rng(seed)
    u1, u2 = rng.random(samples), rng.random(samples)
    z = u1
    r = np.sqrt(1 - z * z)
    wi = np.stack([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2), z], axis=1)
    # n is +Z here
    nl = wi[:, 2]
    nv = wo[2]
    h = wi + wo
    h /= np.linalg.norm(h, axis=1, keepdims=True)
    nh = h[:, 2]
    vh = h @ wo
    a2 = alpha * alpha
    D = a2 / (np.pi * (nh * nh * (a2 - 1) + 1) ** 2)
    k = alpha / 2
    G = (nl / (nl * (1 - k) + k)) * (nv / (nv * (1 - k) + k))
    F = f0 + (1 - f0) * (1 - vh) ** 5
    f = D * G * F / (4 * nl * nv)
    return float(np.mean(f * nl) * 2 * np.pi)


class TestAO:
    def test_empty_scene_is_one(self):
        assert estimate_ao([0, 0, 0], [0, 0, 1], GaussianFrame.empty()) == 1.0

    def test_half_space_wall(self):
        f = half_space_wall()
        bvh = build_bvh(f)
        x = np.array([0.0, 0.0, 0.0])
        n = np.array([0.0, 0.0, 1.0])
        a50 = estimate_ao(x, n, f, bvh, spp=50, eps=0.0)
        sigma = np.sqrt(0.25 / 50)
        assert abs(a50 - 0.5) < 3 * sigma
        a = estimate_ao(x, n, f, bvh, spp=8192, eps=0.0)
        assert abs(a - 0.5) < 3 * np.sqrt(0.25 / 8192) + 0.01

    def test_enclosed_point(self):
        f = enclosing_shell()
        a = estimate_ao([0, 0, 0], [0, 1, 0], f, build_bvh(f), spp=200, eps=0.0)
        assert a < 0.01

    def test_unbiased_against_reference(self):
        f = half_space_wall(gap=0.1, extent=0.6, spacing=0.06)
        bvh = build_bvh(f)
        rng = np.random.default_rng(3)
        for case in range(4):
            x = np.array([0.0, rng.uniform(-0.3, 0.3), rng.uniform(0, 0.3)])
            n = rng.normal(size=3)
            n[0] = abs(n[0])
            n /= np.linalg.norm(n)
            ref = estimate_ao(x, n, f, bvh, spp=100_000, eps=0.0, seed=999)
            runs = estimate_ao(np.tile(x, (64, 1)), n, f, bvh, spp=50, eps=0.0, seed=case,
                               pixels=np.arange(64))
            assert abs(runs.mean() - ref) < 3 * runs.std(ddof=1) / 8 + 1e-9

    def test_thread_and_batch_determinism(self):
        f = half_space_wall(extent=0.5, spacing=0.1)
        bvh = build_bvh(f)
        x = np.random.default_rng(0).uniform(-0.2, 0.2, (40, 3))
        a = estimate_ao(x, [0, 0, 1], f, bvh, spp=16, threads=1)
        b = estimate_ao(x, [0, 0, 1], f, bvh, spp=16, threads=4)
        np.testing.assert_array_equal(a, b)
        single = estimate_ao(x[7], [0, 0, 1], f, bvh, spp=16, pixels=np.array([7]))
        assert single == a[7]


class TestDiffuse:
    def test_constant_env_without_fresnel_weight(self):
        env = EnvironmentMap.constant((0.7, 1.0, 2.0))
        v = estimate_diffuse_residue([0, 0, 0], [0, 1, 0], env, GaussianFrame.empty(), spp=4096,
                                     fresnel_weighted=False)
        np.testing.assert_allclose(v, [0.7, 1.0, 2.0], rtol=1e-9)

    def test_constant_env_zero_f0(self):
        # Schlick with F0 = 0 keeps the grazing term (1 - cos)^5, whose cosine-weighted mean is 1/21
        env = EnvironmentMap.constant((0.7, 1.0, 2.0))
        v = estimate_diffuse_residue(np.zeros((1, 3)), [0, 1, 0], env, GaussianFrame.empty(), spp=200_000,
                                     f0=0.0)[0]
        np.testing.assert_allclose(v, np.array([0.7, 1.0, 2.0]) * 20 / 21, rtol=3e-3)

    def test_constant_env_with_fresnel(self):
        # cosine-weighted mean of 1 - F(cos) = 1 - f0 - (1 - f0) * 2 / 42
        f0 = 0.04
        expect = 1 - f0 - (1 - f0) * 2 * (1 / 6 - 1 / 7)
        env = EnvironmentMap.constant(1.0)
        v = estimate_diffuse_residue(np.zeros((1, 3)), [0, 1, 0], env, GaussianFrame.empty(), spp=200_000)
        np.testing.assert_allclose(v[0], expect, atol=3e-3)

    def test_black_env(self):
        f = half_space_wall(extent=0.5, spacing=0.1)
        v = estimate_diffuse_residue([0, 0, 0], [0, 0, 1], EnvironmentMap.constant(0.0), f, build_bvh(f))
        assert (v == 0).all()

    def test_linear_in_env(self):
        f = half_space_wall(extent=0.5, spacing=0.1)
        bvh = build_bvh(f)
        rng = np.random.default_rng(1)
        env = EnvironmentMap(rng.uniform(0, 1, (8, 16, 3)))
        env2 = EnvironmentMap(2 * env.data)
        x = rng.uniform(-0.1, 0.1, (10, 3))
        a = estimate_diffuse_residue(x, [0, 0, 1], env, f, bvh, spp=32)
        b = estimate_diffuse_residue(x, [0, 0, 1], env2, f, bvh, spp=32)
        np.testing.assert_array_equal(b, 2 * a)


class TestSpecular:
    def test_black_env(self):
        v = estimate_specular([0, 0, 0], [0, 0, 1], [0, 0.3, 1], 0.5, EnvironmentMap.constant(0.0),
                              GaussianFrame.empty())
        assert (v == 0).all()

    @pytest.mark.parametrize("theta", [0.2, 0.9])
    def test_rough_constant_env_matches_uniform_reference(self, theta):
        wo = np.array([np.sin(theta), 0.0, np.cos(theta)])
        ref = ggx_reference(np.array([0, 0, 1.0]), wo, 1.0, 0.04)
        v = estimate_specular(np.zeros((1, 3)), [0, 0, 1], wo, 1.0, EnvironmentMap.constant(1.0),
                              GaussianFrame.empty(), spp=200_000)[0]
        np.testing.assert_allclose(v, ref, rtol=0.02)

    def test_grazing_returns_zero(self):
        v = estimate_specular([0, 0, 0], [0, 0, 1], [1, 0, 1e-6], 0.5, EnvironmentMap.constant(1.0),
                              GaussianFrame.empty())
        assert (v == 0).all()

    def test_mirror_peak(self):
        H, W = 32, 64
        data = np.zeros((H, W, 3))
        data[8, 20] = 5000.0
        env = EnvironmentMap(data)
        light = texel_directions(H, W)[8, 20]
        n = np.array([0.0, 1.0, 0.0])
        mirror = 2 * (light @ n) * n - light
        probes = [mirror]
        rng = np.random.default_rng(0)
        while len(probes) < 12:
            d = rng.normal(size=3)
            d[1] = abs(d[1]) + 0.2
            d /= np.linalg.norm(d)
            if d @ mirror < 0.9:
                probes.append(d)
        vals = [estimate_specular(np.zeros((1, 3)), n, wo, 0.05, env, GaussianFrame.empty(), spp=4096)[0].sum()
                for wo in probes]
        assert int(np.argmax(vals)) == 0

    def test_nonnegative(self):
        rng = np.random.default_rng(4)
        env = EnvironmentMap(rng.uniform(0, 3, (8, 16, 3)))
        wo = rng.normal(size=(50, 3))
        v = estimate_specular(np.zeros((50, 3)), [0, 0, 1], wo, rng.uniform(0, 1, 50), env, GaussianFrame.empty(),
                              spp=16)
        assert (v >= 0).all() and np.isfinite(v).all()


class TestSolveBaseColor:
    def test_half(self):
        rho, valid = solve_base_color([0.5, 1.0, 0.25], [1.0, 2.0, 0.5], [0, 0, 0])
        np.testing.assert_allclose(rho, 0.5)
        assert valid

    def test_zero_denominator_invalid(self):
        _, valid = solve_base_color([0.5, 0.5, 0.5], [0.0, 1.0, 1.0], [0, 0, 0])
        assert not valid

    def test_out_of_band_invalid(self):
        rho, valid = solve_base_color([1.5, 0.5, 0.5], [1.0, 1.0, 1.0], [0, 0, 0])
        assert not valid and rho[0] == 1.0

    def test_scale_consistent(self):
        rng = np.random.default_rng(0)
        Lo, Ld, Ls = rng.uniform(0.1, 1, (3, 100, 3))
        a, _ = solve_base_color(Lo, Ld, Ls * 0.1)
        b, _ = solve_base_color(7.3 * Lo, 7.3 * Ld, 7.3 * Ls * 0.1)
        np.testing.assert_allclose(a, b, atol=1e-6)

    def test_brdf_params(self):
        with pytest.raises(ValueError):
            BRDFParams(metallic=0.5)
        assert BRDFParams().f0 == 0.04


class TestSampler:
    def test_stream_reproducible(self):
        s = Sampler(5)
        a = s.uniforms(3, 1001, 1, 8)
        np.testing.assert_array_equal(a, Sampler(5).uniforms(3, 1001, 1, 8))
        assert not np.array_equal(a, Sampler(6).uniforms(3, 1001, 1, 8))
        assert not np.array_equal(a, s.uniforms(3, 1002, 1, 8))
        assert ((a >= 0) & (a < 1)).all()


class TestDecomposeView:
    def test_background_view(self):
        f = disc_frame([[0, 0, 2.0]], [[0, 0, -1.0]], scale=0.05)
        cam = make_camera([0, 0, 0], [0, 0, -1], 16, 12).with_image(np.zeros((12, 16, 3)))
        maps = decompose_view(f, cam, EnvironmentMap.constant(1.0), Config(spp_ao=4, spp_basecolor=4))
        assert maps.valid.sum() == 0 and (maps.depth == 0).all()

    def test_wall_constant_env(self):
        sc = flat_wall(size=0.8, spacing=0.05, width=24, height=18, fov_deg=20)
        cam = sc.cameras[0]
        env = EnvironmentMap.constant(1.0)
        cfg = Config(spp_ao=32, spp_basecolor=256, specular=False)
        # diffuse-only photo with rho = 0.5 under unit light: L_o = 0.5
        cam = cam.with_image(np.full((18, 24, 3), 0.5))
        maps = decompose_view(sc.frame, cam, env, cfg).validate()
        inner = np.zeros_like(maps.valid)
        inner[4:-4, 4:-4] = True
        assert (maps.valid & inner).sum() == inner.sum()
        np.testing.assert_allclose(maps.ao[inner], 1.0, atol=0.02)
        np.testing.assert_allclose(maps.basecolor[inner], 0.5, atol=0.02)

    def test_thread_determinism_and_io(self, tmp_path):
        sc = flat_wall(size=0.8, spacing=0.05, width=20, height=16, fov_deg=25)
        cam = sc.cameras[0].with_image(np.random.default_rng(0).uniform(0.2, 0.6, (16, 20, 3)))
        env = EnvironmentMap(np.random.default_rng(1).uniform(0.5, 1.5, (8, 16, 3)))
        cfg = Config(spp_ao=8, spp_basecolor=8)
        a = decompose_view(sc.frame, cam, env, cfg, threads=1)
        b = decompose_view(sc.frame, cam, env, cfg, threads=8)
        for name in ("ao", "basecolor", "depth", "normal", "valid"):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
        save_material_maps(a, tmp_path, "v0_")
        back = load_material_maps(tmp_path, "v0_")
        np.testing.assert_array_equal(back.valid, a.valid)
        np.testing.assert_allclose(back.ao, a.ao, atol=1e-7)
        assert (tmp_path / "v0_preview.png").exists()

    def test_missing_photo(self):
        sc = flat_wall(size=0.5, width=8, height=6)
        with pytest.raises(ValueError):
            decompose_view(sc.frame, sc.cameras[0], EnvironmentMap.constant(1.0))


class TestDenoise:
    def _guides(self, H=40, W=40):
        n = np.zeros((H, W, 3))
        n[..., 2] = -1
        return n, np.full((H, W), 2.0)

    def test_constant_unchanged(self):
        n, d = self._guides()
        np.testing.assert_allclose(denoise(np.full((40, 40), 0.3), n, d), 0.3, atol=1e-12)

    def test_noise_variance_reduced(self):
        n, d = self._guides()
        rng = np.random.default_rng(0)
        noisy = 0.5 + rng.normal(scale=0.1, size=(40, 40))
        out = denoise(noisy, n, d)
        inner = (slice(6, -6), slice(6, -6))
        assert noisy[inner].var() / out[inner].var() >= 4.0

    def test_edge_at_depth_discontinuity(self):
        n, d = self._guides(20, 40)
        d[:, 20:] = 3.0
        img = np.where(np.arange(40)[None, :] < 20, 0.2, 0.8) * np.ones((20, 40))
        out = denoise(img, n, d)

        def crossing(row):
            k = np.flatnonzero(row >= 0.5)[0]
            return k - 1 + (0.5 - row[k - 1]) / (row[k] - row[k - 1])

        assert abs(crossing(out[10]) - crossing(img[10])) < 1.0

    def test_range_and_invalid(self):
        n, d = self._guides(16, 16)
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, (16, 16, 3))
        valid = rng.uniform(size=(16, 16)) > 0.3
        out = denoise(img, n, d, valid)
        assert (out >= 0).all() and (out <= 1).all()
        assert (out[~valid] == 0).all()
        img2 = img.copy()
        img2[~valid] = 100.0
        np.testing.assert_allclose(denoise(img2, n, d, valid), out)
