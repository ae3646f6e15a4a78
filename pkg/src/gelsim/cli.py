"""Command-line entry points.

Subcommands: simulate, render, calibrate, gen-synthetic, train-optical,
evaluate. Exit codes: 0 success, 2 input/config error, 3 numeric failure,
4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, calib, datagen, imgio, metrics, mpm, optical
from .camera import build_surface_mesh, render_maps
from .geometry import GeometryError, save_xyz
from .metrics import MetricsError
from .optical import OpticalError
from .scene import ConfigError, build_state, load_scene_config

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

logger = logging.getLogger("gelsim")


class CliInputError(ValueError):
    pass


def _add_common(parser):
    parser.add_argument("--seed", type=int, default=0, help="master seed for stochastic steps")
    parser.add_argument("--threads", type=int, default=1, help="worker threads where supported")
    parser.add_argument("--verbose", action="store_true", help="debug logging")


def _idle_image(args, cfg, mesh, base_particles):
    if getattr(args, "idle", None):
        return imgio.load_ppm(args.idle)
    pattern = optical.make_pattern(cfg.camera.height, cfg.camera.width, seed=args.seed + 1)
    frame = render_maps(mesh.reposed(base_particles), cfg.camera)
    return optical.synth_shade(frame, pattern)


def cmd_simulate(args) -> int:
    cfg = load_scene_config(args.config)
    out = Path(args.out)
    (out / "clouds").mkdir(parents=True, exist_ok=True)
    (out / "maps").mkdir(exist_ok=True)
    state = build_state(cfg)
    mesh = build_surface_mesh(state.particles, cfg.sensor_radius)
    model = optical.load_weights(args.weights) if args.weights else None
    if model is not None:
        (out / "images").mkdir(exist_ok=True)
        idle = _idle_image(args, cfg, mesh, state.particles)
    if args.dump_particles:
        (out / "particles").mkdir(exist_ok=True)

    x0 = state.particles.x.copy()
    t0 = time.time()
    for f in range(cfg.frames):
        state = mpm.step_frame(state)
        save_xyz(mpm.surface_points(state.particles), out / "clouds" / f"{f:04d}.xyz")
        frame = render_maps(mesh.reposed(state.particles), cfg.camera)
        imgio.save_pfm(frame.depth, out / "maps" / f"{f:04d}.pfm")
        imgio.save_ppm(imgio.encode_normal_map(frame.normal), out / "maps" / f"{f:04d}_normal.ppm")
        imgio.save_pbm(frame.valid_mask, out / "maps" / f"{f:04d}_valid.pbm")
        if model is not None:
            composed = optical.predict_composed(model, optical.normalize_inputs(frame), idle)
            imgio.save_ppm(composed, out / "images" / f"{f:04d}.ppm")
        if args.dump_particles:
            mpm.save_particles(state.particles, out / "particles" / f"{f:04d}.mpms")
    wall = time.time() - t0

    disp = float(np.linalg.norm(state.particles.x - x0, axis=1).max())
    summary = {
        "schema_version": 1,
        "frames": cfg.frames,
        "wall_clock_s": wall,
        "fps_achieved": cfg.frames / wall if wall > 0 else float("inf"),
        "max_displacement_mm": disp,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"simulate: {cfg.frames} frames in {wall:.1f}s ({summary['fps_achieved']:.2f} fps)")
    return EXIT_OK


def cmd_render(args) -> int:
    cfg = load_scene_config(args.config)
    dumps = sorted(Path(args.particles).glob("*.mpms"))
    if not dumps:
        raise CliInputError(f"no .mpms particle dumps in {args.particles}")
    out = Path(args.out)
    (out / "maps").mkdir(parents=True, exist_ok=True)
    model = optical.load_weights(args.weights) if args.weights else None

    first = mpm.load_particles(dumps[0])
    base = build_state(cfg)
    if first.n != base.particles.n:
        raise CliInputError(
            f"dump particle count {first.n} does not match the config scene ({base.particles.n})"
        )
    mesh = build_surface_mesh(base.particles, cfg.sensor_radius)
    if model is not None:
        (out / "images").mkdir(exist_ok=True)
        idle = _idle_image(args, cfg, mesh, base.particles)
    for dump in dumps:
        particles = mpm.load_particles(dump)
        frame = render_maps(mesh.reposed(particles), cfg.camera)
        stem = dump.stem
        imgio.save_pfm(frame.depth, out / "maps" / f"{stem}.pfm")
        imgio.save_ppm(imgio.encode_normal_map(frame.normal), out / "maps" / f"{stem}_normal.ppm")
        imgio.save_pbm(frame.valid_mask, out / "maps" / f"{stem}_valid.pbm")
        if model is not None:
            composed = optical.predict_composed(model, optical.normalize_inputs(frame), idle)
            imgio.save_ppm(composed, out / "images" / f"{stem}.ppm")
    print(f"render: {len(dumps)} frames")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = load_scene_config(args.config)
    seq_dirs = sorted(p for p in Path(args.sequences).iterdir() if (p / "seq.json").is_file())
    if not seq_dirs:
        raise CliInputError(f"no sequence directories under {args.sequences}")
    sequences = [datagen.load_sequence_dir(d) for d in seq_dirs]
    template = build_state(cfg)
    init = calib.CalibParams.from_E_nu(args.init_E, args.init_nu)
    result = calib.calibrate(template, sequences, init, lr=args.lr, iters=args.iters,
                             threads=args.threads)
    result.save(args.out)
    print(f"calibrate: E={result.E:.1f} nu={result.nu:.4f} ({result.wall_clock_s:.1f}s)")
    return EXIT_OK


def cmd_gen_synthetic(args) -> int:
    cfg = load_scene_config(args.config)
    manifest = datagen.gen_synthetic(cfg, args.n_scenes, args.out, seed=args.seed)
    n_ok = sum(1 for s in manifest["scenes"] if not s["skipped"])
    print(f"gen-synthetic: {n_ok}/{args.n_scenes} scenes "
          f"({len(manifest['split']['train'])} train / {len(manifest['split']['eval'])} eval)")
    return EXIT_OK


def cmd_train_optical(args) -> int:
    pairs, idle, _ = datagen.load_optical_dataset(args.dataset, split=args.split)
    if not pairs:
        raise CliInputError(f"no '{args.split}' frames in {args.dataset}")
    if args.direct:
        # ablation: regress the raw frame (remapped to [-1, 1]) instead of the residual
        pairs = [(x, (t + idle) * 2.0 - 1.0) for x, t in pairs]
    cfg = optical.TrainConfig(epochs=args.epochs, seed=args.seed, lr=args.lr,
                              batch_size=args.batch_size)
    model = optical.OpticalModel.initialize(seed=args.seed)
    t0 = time.time()
    model, history = optical.train(model, pairs, cfg)
    optical.save_weights(model, args.out)
    hist_path = Path(args.out).with_suffix(".loss.csv")
    metrics.write_metrics_csv(
        hist_path,
        [{"epoch": i, "loss": f"{l:.10e}"} for i, l in enumerate(history)],
        ["epoch", "loss"],
    )
    print(f"train-optical: {len(pairs)} frames, {args.epochs} epochs, "
          f"final loss {history[-1]:.2e} ({time.time()-t0:.1f}s)")
    return EXIT_OK


def _evaluate_dataset(args) -> tuple:
    pairs, idle, manifest = datagen.load_optical_dataset(args.dataset, split=args.split)
    if not pairs:
        raise CliInputError(f"no '{args.split}' frames in {args.dataset}")
    model = optical.load_weights(args.weights)
    dataset_dir = Path(args.dataset)
    wanted = set(manifest["split"][args.split])
    cloud_rows, image_rows = [], []
    k = 0
    for entry in manifest["scenes"]:
        if entry["skipped"] or entry["id"] not in wanted:
            continue
        scene_dir = dataset_dir / entry["dir"]
        for f in range(entry["frames"]):
            opt_in, target_res = pairs[k]
            k += 1
            if args.direct:
                pred_img = optical.predict_direct(model, opt_in)
            else:
                pred_img = optical.predict_composed(model, opt_in, idle)
            gt_img = np.clip(target_res + idle, 0.0, 1.0)
            rep = metrics.image_metrics(pred_img, gt_img)
            image_rows.append({"scene": entry["id"], "frame": f, **rep.to_dict()})
            from .geometry import load_xyz

            pred_cloud = load_xyz(scene_dir / "simclouds" / f"{f:04d}.xyz")
            gt_cloud = load_xyz(scene_dir / "clouds" / f"{f:04d}.xyz")
            n = min(args.n_points, len(pred_cloud), len(gt_cloud))
            crep = metrics.cloud_metrics(pred_cloud, gt_cloud, n=n, seed=args.seed)
            cloud_rows.append({"scene": entry["id"], "frame": f, **crep.to_dict()})
    return cloud_rows, image_rows


def _evaluate_dirs(args) -> tuple:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)

    def frame_images(d):
        sub = d / "images"
        return sorted(sub.glob("*.ppm")) if sub.is_dir() else sorted(d.glob("*.ppm"))

    def frame_clouds(d):
        sub = d / "clouds"
        return sorted(sub.glob("*.xyz")) if sub.is_dir() else sorted(d.glob("*.xyz"))

    pred_imgs, gt_imgs = frame_images(pred_dir), frame_images(gt_dir)
    pred_clouds, gt_clouds = frame_clouds(pred_dir), frame_clouds(gt_dir)
    if len(pred_imgs) != len(gt_imgs) or len(pred_clouds) != len(gt_clouds):
        raise CliInputError(
            f"frame count mismatch: {len(pred_imgs)}/{len(gt_imgs)} images, "
            f"{len(pred_clouds)}/{len(gt_clouds)} clouds"
        )
    if not pred_imgs and not pred_clouds:
        raise CliInputError("nothing to evaluate (no .ppm or .xyz frames found)")
    from .geometry import load_xyz

    image_rows = []
    for p, g in zip(pred_imgs, gt_imgs):
        rep = metrics.image_metrics(imgio.load_ppm(p), imgio.load_ppm(g))
        image_rows.append({"frame": p.stem, **rep.to_dict()})
    cloud_rows = []
    for p, g in zip(pred_clouds, gt_clouds):
        a, b = load_xyz(p), load_xyz(g)
        n = min(args.n_points, len(a), len(b))
        rep = metrics.cloud_metrics(a, b, n=n, seed=args.seed)
        cloud_rows.append({"frame": p.stem, **rep.to_dict()})
    return cloud_rows, image_rows


def cmd_evaluate(args) -> int:
    if args.dataset:
        if not args.weights:
            raise CliInputError("--dataset evaluation requires --weights")
        cloud_rows, image_rows = _evaluate_dataset(args)
    elif args.pred and args.gt:
        cloud_rows, image_rows = _evaluate_dirs(args)
    else:
        raise CliInputError("provide either --dataset/--weights or --pred/--gt")
    metrics.write_metrics_report(args.out, cloud_rows, image_rows)
    csv_path = Path(args.out).with_suffix(".csv")
    rows = [
        {**c, **{k: v for k, v in i.items() if k not in ("scene", "frame")}}
        for c, i in zip(cloud_rows, image_rows)
    ] or cloud_rows or image_rows
    metrics.write_metrics_csv(csv_path, rows, list(rows[0].keys()))
    print(f"evaluate: {max(len(cloud_rows), len(image_rows))} frames -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gelsim",
        description="Differentiable MPM simulation of a hemispherical-gel optical tactile sensor",
    )
    parser.add_argument("--version", action="version", version=f"gelsim {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run a scene and dump per-frame artifacts")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--weights", help="optical weights file; enables composed images")
    p.add_argument("--idle", help="idle frame PPM (default: synthesized)")
    p.add_argument("--dump-particles", action="store_true")
    _add_common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("render", help="re-render maps from saved particle dumps")
    p.add_argument("--config", required=True)
    p.add_argument("--particles", required=True, help="directory of .mpms dumps")
    p.add_argument("--out", required=True)
    p.add_argument("--weights")
    p.add_argument("--idle")
    _add_common(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("calibrate", help="fit (E, nu) against demonstration sequences")
    p.add_argument("--config", required=True)
    p.add_argument("--sequences", required=True, help="directory of sequence subdirectories")
    p.add_argument("--out", required=True)
    p.add_argument("--init-E", type=float, default=3 * 27575.0)
    p.add_argument("--init-nu", type=float, default=0.40)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--iters", type=int, default=30)
    _add_common(p)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-scenes", type=int, required=True)
    _add_common(p)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train-optical", help="train the residual image model")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output weights file")
    p.add_argument("--split", default="train", choices=["train", "eval", "all"])
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--direct", action="store_true",
                   help="ablation: regress raw frames instead of residuals")
    _add_common(p)
    p.set_defaults(func=cmd_train_optical)

    p = sub.add_parser("evaluate", help="compute cloud/image metrics")
    p.add_argument("--pred")
    p.add_argument("--gt")
    p.add_argument("--dataset")
    p.add_argument("--weights")
    p.add_argument("--direct", action="store_true")
    p.add_argument("--split", default="eval", choices=["train", "eval", "all"])
    p.add_argument("--out", required=True)
    p.add_argument("--n-points", type=int, default=2048)
    _add_common(p)
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, GeometryError, MetricsError, CliInputError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (mpm.SimulationError, OpticalError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
