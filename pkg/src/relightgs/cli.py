"""Command-line pipeline: synth, refine, decompose, bake, extract-mesh, render, eval.

Every stage writes a ``manifest.json`` next to its outputs with the effective
configuration, its hash, the seed, library versions and content hashes of
the inputs, so two runs with equal manifests can be compared byte for byte.
Exit codes: 0 success, 2 bad input, 3 numerical failure.
"""

import argparse
import hashlib
import json
import logging
import os
import platform
import sys

import numpy as np

from . import __version__
from .config import ConfigError, load_config

log = logging.getLogger("relightgs")

EXIT_OK = 0
EXIT_BAD_INPUT = 2
EXIT_NUMERICAL = 3


class NumericalFailure(RuntimeError):
    pass


# --------------------------------------------------------------------------- helpers

def _versions():
    import numba
    import scipy
    import skimage

    return {"relightgs": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "scikit-image": skimage.__version__}


def _file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _input_record(path):
    """Path plus content hashes of a file or every file under a directory."""
    if path is None:
        return None
    if os.path.isdir(path):
        files = {}
        for root, _, names in sorted(os.walk(path)):
            for name in sorted(names):
                if name == "manifest.json":
                    continue
                p = os.path.join(root, name)
                files[os.path.relpath(p, path)] = _file_hash(p)
        return {"path": os.path.abspath(path), "files": files}
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return {"path": os.path.abspath(path), "sha256": _file_hash(path)}


def _write_manifest(out, stage, config, inputs, extra=None):
    outputs = []
    for root, _, names in sorted(os.walk(out)):
        for name in sorted(names):
            if name != "manifest.json":
                outputs.append(os.path.relpath(os.path.join(root, name), out))
    manifest = {"stage": stage, "inputs": {k: _input_record(v) for k, v in inputs.items()},
                "config": config.to_dict(), "config_hash": config.hash(), "seed": config.seed,
                "threads": config.threads, "versions": _versions(), "outputs": outputs}
    if extra:
        manifest.update(extra)
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_results(out, results):
    with open(os.path.join(out, "results.json"), "w") as fh:
        json.dump(results, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_views(path, frames, load_images=True):
    """One camera list per frame: a single file shared by all frames or a directory of frame_*.txt."""
    from .io import FormatError, load_cameras

    if os.path.isdir(path):
        files = sorted(f for f in os.listdir(path) if f.startswith("frame_") and f.endswith(".txt"))
        if len(files) != frames:
            raise FormatError(f"{path}: {len(files)} camera files for {frames} frames")
        return [load_cameras(os.path.join(path, f), load_images) for f in files]
    cams = load_cameras(path, load_images)
    return [cams] * frames


def _save_sequence(seq, out):
    from .io import save_sequence

    return save_sequence(seq, os.path.join(out, "sequence"))


def _mkdir(path):
    os.makedirs(path, exist_ok=True)
    return path


# --------------------------------------------------------------------------- stages

def cmd_synth(args, config):
    from .io import save_cameras, save_sequence, write_pfm
    from .relight import render_offline
    from .rt import build_bvh
    from .scene import GaussianSequence
    from .synth import SCENES, sky_environment

    kwargs = {}
    if args.scene != "cloud":
        kwargs.update(width=args.width, height=args.height)
    if args.scene in ("sphere", "blob"):
        kwargs["views"] = args.views
    if args.spacing is not None and args.scene != "cloud":
        kwargs["spacing"] = args.spacing
    if args.scene == "cloud":
        kwargs["seed"] = config.seed
    scene = SCENES[args.scene](**kwargs)
    if args.scene == "cloud":
        scene.cameras = [c.__class__(args.width, args.height, c.fx * args.width / c.width,
                                     c.fy * args.height / c.height, c.cx * args.width / c.width,
                                     c.cy * args.height / c.height, c.world_to_camera, None, c.name)
                         for c in scene.cameras]
    env = sky_environment()
    out = _mkdir(args.out)
    velocity = np.array(args.velocity, dtype=np.float64)

    inputs, truths = [], []
    for t in range(args.frames):
        f = scene.frame.replace(means=scene.frame.means + t * velocity, t=t)
        truth = f.replace(sh=None)
        inputs.append(f.replace(base_color=None, roughness=None, ao=None))
        truths.append(truth)
    save_sequence(GaussianSequence(inputs), os.path.join(out, "sequence"))
    save_sequence(GaussianSequence(truths), os.path.join(out, "truth"))
    write_pfm(os.path.join(out, "env.pfm"), env.data)

    cam_dir = _mkdir(os.path.join(out, "cameras"))
    for t, truth in enumerate(truths):
        bvh = build_bvh(truth)
        img_dir = _mkdir(os.path.join(cam_dir, f"frame_{t:04d}"))
        paths = []
        for v, cam in enumerate(scene.cameras):
            log.info("synth: frame %d view %d", t, v)
            r = render_offline(truth, bvh, cam, env, spp=config.spp_render, config=config,
                               view=t * len(scene.cameras) + v, threads=config.threads)
            write_pfm(os.path.join(img_dir, f"{cam.name}.pfm"), r.linear)
            paths.append(f"frame_{t:04d}/{cam.name}.pfm")
        save_cameras(scene.cameras, os.path.join(cam_dir, f"frame_{t:04d}.txt"), paths)

    truth_json = {"scene": args.scene, "frames": args.frames, "velocity": velocity.tolist()}
    for k, v in scene.truth.items():
        truth_json[k] = v.tolist() if isinstance(v, np.ndarray) else v
    with open(os.path.join(out, "truth.json"), "w") as fh:
        json.dump(truth_json, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "synth", config, {}, {"scene": args.scene})
    return EXIT_OK


def cmd_refine(args, config):
    from .io import load_sequence
    from .refine import refine_sequence, write_energy_log

    seq = load_sequence(args.sequence)
    views = _load_views(args.cameras, len(seq))
    refined, logs = refine_sequence(seq, views, config, threads=config.threads)
    out = _mkdir(args.out)
    _save_sequence(refined, out)
    diverged = []
    for t, lg in enumerate(logs):
        write_energy_log(lg, os.path.join(out, f"energy_frame_{t:04d}.csv"), t)
        if lg.diverged:
            diverged.append(t)
    results = {"frames": len(logs), "diverged_frames": diverged,
               "final_energy": [lg.rows[-1][6] if lg.rows else None for lg in logs]}
    _write_results(out, results)
    _write_manifest(out, "refine", config, {"sequence": args.sequence, "cameras": args.cameras})
    if diverged:
        raise NumericalFailure(f"refinement diverged on frames {diverged}")
    return EXIT_OK


def cmd_decompose(args, config):
    from .decompose import decompose_view, save_material_maps
    from .io import load_environment, load_sequence
    from .rt import build_bvh

    seq = load_sequence(args.sequence)
    views = _load_views(args.cameras, len(seq))
    env = load_environment(args.env)
    out = _mkdir(args.out)
    stats = []
    for t, frame in enumerate(seq):
        bvh = build_bvh(frame)
        for v, cam in enumerate(views[t]):
            log.info("decompose: frame %d view %d", t, v)
            maps = decompose_view(frame, cam, env, config, bvh, view_id=t * len(views[t]) + v,
                                  threads=config.threads)
            save_material_maps(maps, os.path.join(out, f"frame_{t:04d}"), f"view_{v:02d}_")
            fg = maps.depth > 0
            stats.append({"frame": t, "view": v, "foreground": int(fg.sum()), "valid": int(maps.valid.sum()),
                          "mean_ao": float(maps.ao[fg].mean()) if fg.any() else None})
    _write_results(out, {"views": stats})
    _write_manifest(out, "decompose", config, {"sequence": args.sequence, "cameras": args.cameras,
                                               "env": args.env})
    return EXIT_OK


def _load_maps(directory, frames, counts):
    from .decompose import load_material_maps

    return [[load_material_maps(os.path.join(directory, f"frame_{t:04d}"), f"view_{v:02d}_")
             for v in range(counts[t])] for t in range(frames)]


def cmd_bake(args, config):
    from .bake import BakeError, assign_roughness_sequence, bake_attribute, reparameterize
    from .io import load_image, load_sequence
    from .meshx import load_obj
    from .scene import GaussianSequence

    seq = load_sequence(args.sequence)
    views = _load_views(args.cameras, len(seq), load_images=False)
    maps = _load_maps(args.maps, len(seq), [len(v) for v in views])
    mesh = texture = None
    if args.roughness_texture:
        if not args.mesh:
            raise ConfigError("--roughness-texture needs --mesh")
        mesh = load_obj(args.mesh)
        texture = load_image(args.roughness_texture)
    seq = assign_roughness_sequence(seq, mesh, texture, config)
    out = _mkdir(args.out)
    results = {}
    try:
        for which in ("ao", "base_color"):
            res = bake_attribute(seq, views, maps, which, config, threads=config.threads)
            seq = res.sequence
            np.savetxt(os.path.join(out, f"loss_{which}.txt"), np.array(res.loss))
            with open(os.path.join(out, f"coverage_{which}.txt"), "w") as fh:
                fh.write(res.coverage_log())
            results[which] = {"iterations": res.iterations, "converged": res.converged,
                              "initial_loss": res.loss[0], "final_loss": res.loss[-1], "residuals": res.residuals}
    except BakeError as e:
        raise NumericalFailure(str(e)) from e
    seq = GaussianSequence([reparameterize(f, strict=config.strict_reparam) for f in seq])
    _save_sequence(seq, out)
    _write_results(out, results)
    _write_manifest(out, "bake", config, {"sequence": args.sequence, "cameras": args.cameras, "maps": args.maps,
                                          "mesh": args.mesh, "roughness_texture": args.roughness_texture})
    return EXIT_OK


def cmd_extract_mesh(args, config):
    from .io import load_sequence
    from .meshx import FusionError, marching_cubes, save_obj, save_ply, tsdf_fuse, uv_atlas

    seq = load_sequence(args.sequence)
    views = _load_views(args.cameras, len(seq), load_images=False)
    out = _mkdir(args.out)
    stats = []
    for t, frame in enumerate(seq):
        vol = tsdf_fuse(frame, views[t], config.voxel_size, config.truncation_distance, threads=config.threads)
        mesh = marching_cubes(vol)
        if mesh.is_empty:
            raise FusionError(f"frame {t}: fused volume has no surface")
        mesh = uv_atlas(mesh)
        save_obj(mesh, os.path.join(out, f"mesh_{t:04d}.obj"))
        save_ply(mesh, os.path.join(out, f"mesh_{t:04d}.ply"))
        stats.append({"frame": t, "vertices": len(mesh.vertices), "faces": len(mesh.faces),
                      "area": float(mesh.face_areas().sum())})
    _write_results(out, {"meshes": stats})
    _write_manifest(out, "extract-mesh", config, {"sequence": args.sequence, "cameras": args.cameras})
    return EXIT_OK


def cmd_render(args, config):
    from .io import load_environment, load_sequence
    from .relight import prefilter_env, render_deferred, render_offline, save_rendering
    from .rt import build_bvh

    seq = load_sequence(args.sequence)
    views = _load_views(args.cameras, len(seq), load_images=False)
    env = load_environment(args.env)
    if args.rotate:
        env = env.rotated(np.deg2rad(args.rotate))
    out = _mkdir(args.out)
    pre = prefilter_env(env, config, seed=config.seed) if args.mode == "deferred" else None
    for t, frame in enumerate(seq):
        bvh = build_bvh(frame) if args.mode == "offline" else None
        for v, cam in enumerate(views[t]):
            if args.mode == "deferred":
                r = render_deferred(frame, cam, pre, args.exposure, config, threads=config.threads)
            else:
                r = render_offline(frame, bvh, cam, env, config.spp_render, args.exposure, config,
                                   view=t * len(views[t]) + v, threads=config.threads)
            stem = os.path.join(out, f"frame_{t:04d}_{cam.name}")
            save_rendering(r, stem + ".png", stem + ".pfm")
    _write_manifest(out, "render", config, {"sequence": args.sequence, "cameras": args.cameras, "env": args.env},
                    {"mode": args.mode, "exposure": args.exposure, "rotate_deg": args.rotate})
    return EXIT_OK


def _image_pairs(pred, ref):
    if os.path.isdir(pred) != os.path.isdir(ref):
        raise ConfigError("--pred and --ref must both be files or both be directories")
    if not os.path.isdir(pred):
        return [(os.path.basename(pred), pred, ref)]
    names = sorted(f for f in os.listdir(ref) if f.lower().endswith((".png", ".pfm")))
    pairs = [(n, os.path.join(pred, n), os.path.join(ref, n)) for n in names
             if os.path.exists(os.path.join(pred, n))]
    if not pairs:
        raise FileNotFoundError(f"no matching images between {pred} and {ref}")
    return pairs


def cmd_eval(args, config):
    from .io import load_image
    from .meshx import chamfer, load_obj, load_ply
    from .metrics import format_psnr, psnr, ssim

    results = {}
    if args.pred or args.ref:
        if not (args.pred and args.ref):
            raise ConfigError("image evaluation needs both --pred and --ref")
        rows = []
        for name, p, r in _image_pairs(args.pred, args.ref):
            a, b = load_image(p), load_image(r)
            if a.shape != b.shape:
                raise ConfigError(f"{name}: shape mismatch {a.shape} vs {b.shape}")
            if p.lower().endswith(".png"):
                from .color import linear_to_srgb

                a, b = linear_to_srgb(a), linear_to_srgb(b)
            v = psnr(a, b)
            rows.append({"image": name, "psnr": v, "psnr_text": format_psnr(v), "ssim": ssim(a, b)})
            log.info("%s: PSNR %s, SSIM %.4f", name, rows[-1]["psnr_text"], rows[-1]["ssim"])
        results["images"] = rows
        results["mean_psnr"] = float(np.mean([r["psnr"] for r in rows]))
        results["mean_ssim"] = float(np.mean([r["ssim"] for r in rows]))
    if args.mesh_pred or args.mesh_ref:
        if not (args.mesh_pred and args.mesh_ref):
            raise ConfigError("mesh evaluation needs both --mesh-pred and --mesh-ref")

        def rd(p):
            return load_ply(p) if p.lower().endswith(".ply") else load_obj(p)

        results["chamfer"] = chamfer(rd(args.mesh_pred), rd(args.mesh_ref), args.samples, config.seed)
        log.info("chamfer: %.6f", results["chamfer"])
    if not results:
        raise ConfigError("nothing to evaluate: give --pred/--ref and/or --mesh-pred/--mesh-ref")
    out = _mkdir(args.out)
    _write_results(out, results)
    _write_manifest(out, "eval", config, {"pred": args.pred, "ref": args.ref, "mesh_pred": args.mesh_pred,
                                          "mesh_ref": args.mesh_ref})
    print(json.dumps({k: v for k, v in results.items() if k != "images"}, sort_keys=True))
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def _global_options(p, suppress):
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--threads", type=int, default=d, help="worker threads (overrides the config)")
    p.add_argument("--config", default=d, help="JSON config file")
    p.add_argument("--set", action="append", default=argparse.SUPPRESS if suppress else [], metavar="KEY=VALUE",
                   dest="overrides", help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser():
    parser = argparse.ArgumentParser(prog="relightgs", description=__doc__.splitlines()[0])
    _global_options(parser, False)
    common = argparse.ArgumentParser(add_help=False)
    _global_options(common, True)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "generate a synthetic scene with ground truth and photographs")
    p.add_argument("scene", choices=("wall", "sphere", "blob", "cloud"))
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=1)
    p.add_argument("--velocity", type=float, nargs=3, default=(0.01, 0.0, 0.0), metavar=("VX", "VY", "VZ"))
    p.add_argument("--views", type=int, default=8)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--spacing", type=float, default=None)

    p = add("refine", cmd_refine, "two-phase geometry refinement")
    p.add_argument("--sequence", required=True)
    p.add_argument("--cameras", required=True, help="camera file or directory of frame_*.txt")
    p.add_argument("--out", required=True)

    p = add("decompose", cmd_decompose, "per-view AO and base colour maps")
    p.add_argument("--sequence", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--out", required=True)

    p = add("bake", cmd_bake, "bake material maps onto the Gaussians and drop view-dependent colour")
    p.add_argument("--sequence", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--maps", required=True)
    p.add_argument("--mesh", default=None)
    p.add_argument("--roughness-texture", default=None)
    p.add_argument("--out", required=True)

    p = add("extract-mesh", cmd_extract_mesh, "TSDF fusion and marching cubes per frame")
    p.add_argument("--sequence", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--out", required=True)

    p = add("render", cmd_render, "relight a baked sequence")
    p.add_argument("--sequence", required=True)
    p.add_argument("--cameras", required=True)
    p.add_argument("--env", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("deferred", "offline"), default="deferred")
    p.add_argument("--exposure", type=float, default=1.0)
    p.add_argument("--rotate", type=float, default=0.0, help="rotate the environment about +Y (degrees)")

    p = add("eval", cmd_eval, "PSNR/SSIM between images and Chamfer distance between meshes")
    p.add_argument("--pred", default=None)
    p.add_argument("--ref", default=None)
    p.add_argument("--mesh-pred", default=None)
    p.add_argument("--mesh-ref", default=None)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None):
    from .bake import BakeError
    from .meshx import FusionError
    from .scene import SceneError

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    try:
        overrides = list(args.overrides)
        if args.threads is not None:
            overrides.append(f"threads={args.threads}")
        config = load_config(args.config, overrides)
        return args.func(args, config)
    except (ConfigError, SceneError, FusionError, FileNotFoundError, NotImplementedError) as e:
        log.error("%s", e)
        return EXIT_BAD_INPUT
    except (BakeError, NumericalFailure, FloatingPointError) as e:
        log.error("numerical failure: %s", e)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
