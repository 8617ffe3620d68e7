import csv

import numpy as np
import pytest

from conftest import random_frame
from relightgs.config import Config
from relightgs.raster import rasterize
from relightgs.refine import (Anchor, check_gradients, energy, refine_frame, refine_sequence, smooth_energy,
                              temporal_energy, write_energy_log)
from relightgs.scene import GaussianSequence, axis_angle_to_quat, quat_multiply, rotmat_to_quat
from relightgs.synth import flat_wall


def tiny_wall(k=5, width=16, spacing=0.05):
    """k x k splat wall filling a single fronto view, photographed in its clean state."""
    extent = spacing * (k - 1)
    fov = 2 * np.degrees(np.arctan(extent / 2)) * 0.95
    scene = flat_wall(size=extent, spacing=spacing, depth=1.0, width=width, height=width, fov_deg=fov)
    cam = scene.cameras[0]
    return scene.frame, cam.with_image(rasterize(scene.frame, cam).color)


def tilt(frame, idx, degrees, axis=(1.0, 0.0, 0.0)):
    q = np.array(frame.quats)
    v = np.radians(degrees) * np.asarray(axis)
    q[idx] = quat_multiply(axis_angle_to_quat(np.broadcast_to(v, (len(np.atleast_1d(idx)), 3))), q[idx])
    return frame.replace(quats=q)


class TestStandInTerms:
    def test_temporal_zero_for_equal_frames(self):
        f = random_frame(20, seed=1)
        assert temporal_energy(f, f) == 0.0
        assert temporal_energy(f, None) == 0.0

    def test_temporal_counts_every_attribute(self):
        f = random_frame(5, seed=2)
        g = f.replace(opacities=np.array(f.opacities) + 0.1)
        assert temporal_energy(g, f) == pytest.approx(5 * 0.01)

    def test_smooth_zero_under_rigid_motion(self):
        f = random_frame(40, seed=3)
        anchor = Anchor.from_frame(f, k=8)
        assert smooth_energy(f.replace(means=f.means + [0.3, -1.0, 2.0]), anchor) < 1e-24
        R = np.linalg.qr(np.random.default_rng(0).normal(size=(3, 3)))[0]
        R *= np.linalg.det(R)
        q = quat_multiply(np.broadcast_to(rotmat_to_quat(R[None])[0], (40, 4)), f.quats)
        moved = f.replace(means=f.means @ R.T, quats=q)
        assert smooth_energy(moved, anchor) < 1e-20

    def test_smooth_positive_for_deformation(self):
        f = random_frame(40, seed=4)
        anchor = Anchor.from_frame(f, k=8)
        m = np.array(f.means)
        m[0] += 0.1
        assert smooth_energy(f.replace(means=m), anchor) > 1e-4


class TestEnergy:
    def test_breakdown_sums_to_total(self):
        frame, cam = tiny_wall(k=3)
        prev = frame
        frame = tilt(frame, [4], 20.0)
        cfg = Config()
        res = energy(frame, [cam], cfg, prev_frame=prev, grad=False)
        t = res.terms
        ref = (cfg.lambda_color * t["color"] + cfg.lambda_smooth * t["smooth"] + cfg.lambda_temp * t["temp"]
               + cfg.lambda_normal * t["normal"])
        assert res.total == pytest.approx(ref, rel=1e-12)
        assert t["temp"] > 0 and t["normal"] > 0

    def test_requires_view(self):
        with pytest.raises(ValueError):
            energy(random_frame(3), [])

    def test_gradient_self_check(self):
        frame, cam = tiny_wall(k=3)
        frame = tilt(frame, [1, 4], 15.0, axis=(0.6, 0.8, 0.0))
        checks = check_gradients(frame, [cam], Config(), coords=10, seed=1)
        bad = [c for c in checks if not c[5]]
        assert not bad, bad


class TestRefine:
    def test_zero_iterations_identity(self):
        frame, cam = tiny_wall(k=3)
        out, log = refine_frame(frame, [cam], appearance_iters=0, normal_iters=0)
        assert out is frame and log.rows == []
        seq = GaussianSequence([frame, frame.replace(t=1)])
        out_seq, _ = refine_sequence(seq, [cam], appearance_iters=0, normal_iters=0)
        assert all(a is b for a, b in zip(out_seq, seq))

    def test_perturbed_splat_recovers(self):
        frame, cam = tiny_wall()
        noisy = tilt(frame, [12], 30.0)
        e0 = energy(noisy, [cam], grad=False).terms["normal"]
        out, log = refine_frame(noisy, [cam], params=("rot",), appearance_iters=0, normal_iters=100)
        e1 = energy(out, [cam], grad=False).terms["normal"]
        assert not log.diverged
        assert e1 <= 0.5 * e0

    def test_energy_log_monotone_per_phase(self, tmp_path):
        frame, cam = tiny_wall(k=3)
        noisy = tilt(frame, [0, 4, 8], 20.0, axis=(0.0, 1.0, 0.0))
        _, log = refine_frame(noisy, [cam], appearance_iters=3, normal_iters=3)
        rows = np.array([r[1:] for r in log.rows], dtype=float)
        phase = np.array([r[0] for r in log.rows])
        assert set(phase) == {1, 2}
        for p in (1, 2):
            assert (np.diff(rows[phase == p, 5]) <= 0).all()
        # phase 1 runs without the normal term
        assert log.phase_starts[1] <= log.phase_starts[2]
        path = tmp_path / "energy.csv"
        write_energy_log(log, path, frame_index=0)
        with open(path) as fh:
            table = list(csv.reader(fh))
        assert table[0] == ["frame", "phase", "iteration", "E_color", "E_smooth", "E_temp", "E_normal", "E_total",
                            "step"]
        assert len(table) == len(log.rows) + 1

    def test_zero_normal_weight_matches_appearance_only(self):
        frame, cam = tiny_wall(k=3)
        sh = np.array(frame.sh)
        sh[:, 0, :] += 0.3
        start = frame.replace(sh=sh)
        cfg = Config(lambda_normal=0.0)
        a, _ = refine_frame(start, [cam], cfg, params=("color",), appearance_iters=30, normal_iters=10)
        b, _ = refine_frame(start, [cam], cfg, params=("color",), appearance_iters=30, normal_iters=0)
        ea = energy(a, [cam], cfg, grad=False).terms["color"]
        eb = energy(b, [cam], cfg, grad=False).terms["color"]
        assert abs(ea - eb) < 1e-4

    def test_divergence_flagged(self, monkeypatch):
        import relightgs.refine as refine

        frame, cam = tiny_wall(k=3)
        noisy = tilt(frame, [4], 20.0)
        orig = refine._step_frame
        monkeypatch.setattr(refine, "_step_frame",
                            lambda f, g, s, fac: orig(f, {k: -v for k, v in g.items()}, s, fac))
        out, log = refine.refine_frame(noisy, [cam], params=("rot",), appearance_iters=0, normal_iters=5)
        assert log.diverged
        np.testing.assert_array_equal(out.quats, noisy.quats)

    def test_sequence_regularised_to_previous(self):
        frame, cam = tiny_wall(k=3)
        seq = GaussianSequence([tilt(frame, [4], 10.0), tilt(frame, [4], 12.0).replace(t=1)])
        out, logs = refine_sequence(seq, [cam], params=("rot",), appearance_iters=1, normal_iters=1)
        assert len(out) == 2 and len(logs) == 2
        assert logs[0].rows[0][4] == 0.0      # no previous frame
        assert logs[1].rows[0][4] > 0.0
