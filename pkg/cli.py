import argparse
import csv
import os
import time
from typing import Optional

import numpy as np
from pydantic import ValidationError

from cameras import camera_rays, load_cameras
from compose import ComposeOptions, compose_frame, compose_rays
from config import config_keys, describe_validation_error, load_config, save_config
from errors import ConfigError, DataError, NumericalError
from metrics import metrics_psnr_ssim
from optim import compose_options, train
from scene_io import load_image, load_scene, save_image, save_normal_map, write_pfm
from synthetic import SYNTHETIC_SCENES, make_synthetic
from tracer import TraceOptions
from utils.console_utils import console, display_config_tree, log_info, print_table

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4
EQUALITY_TOLERANCE = 1e-6


def config_epilog() -> str:
    lines = ["config keys (set in the JSON file or with --set key=value):"]
    for key, default, description in config_keys():
        lines.append(f"  {key} (default {default!r}): {description}")
    return "\n".join(lines)


def parse_list(value: str, cast) -> list:
    try:
        return [cast(item) for item in value.split(",") if item.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"invalid list '{value}': {e}") from e


def cmd_train(args: argparse.Namespace) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = load_config(args.config, overrides)
    scene_path = args.scene or cfg.scene
    if scene_path is None:
        raise ConfigError("scene: no scene manifest given (set 'scene' in the config or pass --scene)")
    bundle = load_scene(scene_path)
    display_config_tree("Training config", cfg.model_dump())

    os.makedirs(args.out, exist_ok=True)
    save_config(os.path.join(args.out, "config.json"), cfg)
    result = train(cfg, bundle, args.out, threads=args.threads, resume=args.resume)
    if result.metrics:
        last = result.metrics[-1]
        log_info(f"Finished at step {last.step + 1}: psnr {last.psnr:.2f}, "
                 f"{last.n_base} base / {last.n_env} env surfels")
    log_info(f"Metrics written to {result.metrics_path}")
    return EXIT_OK


def cmd_render(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, args.set)
    if args.threads is not None:
        cfg = cfg.model_copy(update={"threads": args.threads})
    bundle = load_scene(args.scene)
    if bundle.base is None:
        raise DataError(f"{args.scene} has no base set to render")
    cameras = load_cameras(args.cameras) if args.cameras else bundle.cameras
    env = bundle.env
    os.makedirs(args.out, exist_ok=True)

    for index, camera in enumerate(cameras):
        frame = compose_frame(bundle.base, env, camera, compose_options(cfg, env is not None))
        save_image(os.path.join(args.out, f"{index:03d}.png"), np.clip(frame.image(), 0.0, 1.0))
        if args.dump_gbuffer:
            stem = os.path.join(args.out, f"{index:03d}")
            gbuf = frame.gbuffer
            save_image(f"{stem}_blend.png", gbuf.image("blend"))
            save_normal_map(f"{stem}_normal.png", gbuf.image("normal"))
            write_pfm(f"{stem}_depth.pfm", gbuf.image("depth"))
            save_image(f"{stem}_base.png", np.clip(gbuf.image("base_color"), 0.0, 1.0))
            save_image(f"{stem}_reflection.png", np.clip(frame.image("reflection"), 0.0, 1.0))
    log_info(f"Rendered {len(cameras)} views to {args.out}")
    return EXIT_OK


def _image_files(directory: str) -> list[str]:
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"Directory not found: {directory}")
    names = [n for n in os.listdir(directory) if n.lower().endswith((".png", ".pfm"))]
    # skip G-buffer dumps written next to renders
    return sorted(n for n in names if "_" not in os.path.splitext(n)[0])


def cmd_eval(args: argparse.Namespace) -> int:
    renders = _image_files(args.renders)
    targets = _image_files(args.gt)
    if len(renders) != len(targets):
        raise DataError(f"{args.renders} has {len(renders)} images but {args.gt} has {len(targets)}")

    rows = []
    for render_name, gt_name in zip(renders, targets):
        render = load_image(os.path.join(args.renders, render_name))
        gt = load_image(os.path.join(args.gt, gt_name))
        if render.shape != gt.shape:
            raise DataError(f"{render_name} is {render.shape}, {gt_name} is {gt.shape}")
        value_psnr, value_ssim = metrics_psnr_ssim(render, gt)
        rows.append([render_name, value_psnr, value_ssim])
    if rows:
        rows.append(["mean", float(np.mean([r[1] for r in rows])), float(np.mean([r[2] for r in rows]))])

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "eval.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["image", "psnr", "ssim"])
        writer.writerows(rows)
    print_table("Evaluation", ["image", "psnr", "ssim"], rows)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    bundle = load_scene(args.scene)
    if not bundle.cameras:
        raise DataError(f"{args.scene} has no cameras")
    base = bundle.base
    env = bundle.env
    origins, directions = camera_rays(bundle.cameras[0])
    if args.rays is not None:
        origins, directions = origins[:args.rays], directions[:args.rays]
    if base is None or not len(base):
        origins, directions = origins[:0], directions[:0]

    rows = []
    mismatch = False
    for floor in args.floors:
        reference = None
        for k in args.k:
            opts = ComposeOptions(trace=TraceOptions(k=k, threads=args.threads), blend_floor=floor,
                                  env_enabled=env is not None)
            start = time.perf_counter()
            if len(origins):
                frame = compose_rays(base, env, origins, directions, opts)
                output = frame.final
                reflected = int(frame.reflect_mask.sum())
            else:
                output = np.zeros((0, 3))
                reflected = 0
            seconds = time.perf_counter() - start
            if reference is None:
                reference = output
            max_diff = float(np.max(np.abs(output - reference))) if len(output) else 0.0
            mismatch |= max_diff > EQUALITY_TOLERANCE
            rate = len(origins) / seconds if len(origins) and seconds > 0 else 0.0
            rows.append([floor, k, len(origins), reflected, seconds, rate, max_diff])

    columns = ["blend_floor", "k", "rays", "reflected", "seconds", "rays_per_second", "max_diff"]
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "bench.csv"), "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        writer.writerows(rows)
    print_table("Traversal benchmark", columns, rows)
    if mismatch:
        raise NumericalError(f"outputs differ across k by more than {EQUALITY_TOLERANCE}", 0)
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    scene = make_synthetic(args.name, seed=args.seed, n_views=args.views, width=args.width, height=args.height,
                           threads=args.threads or 1, env_distance=args.env_distance)
    scene.save(args.out, include_sets=args.with_sets)
    return EXIT_OK


def cmd_config(args: argparse.Namespace) -> int:
    from config_wizard import run_wizard
    run_wizard(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="main.py", description="Reflective surfel ray tracer and trainer")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Optimize a scene", epilog=config_epilog(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", help="Flat JSON training config")
    p.add_argument("--scene", help="scene.json manifest (overrides the config's 'scene')")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config key")
    p.add_argument("--seed", type=int, help="Override the config seed")
    p.add_argument("--threads", type=int, help="Worker processes (threads=1 is bit-reproducible)")
    p.add_argument("--resume", help="Checkpoint directory to resume from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="Render every camera of a scene", epilog=config_epilog(),
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--scene", required=True, help="scene.json with base (and optionally env) sets")
    p.add_argument("--cameras", help="Cameras JSON replacing the scene's cameras")
    p.add_argument("--out", required=True, help="Output directory")
    p.add_argument("--config", help="Config whose tracing keys are used")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override a config key")
    p.add_argument("--threads", type=int, help="Worker processes")
    p.add_argument("--dump-gbuffer", action="store_true",
                   help="Also write blend, normal, depth, base color and reflection images")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM of renders against ground truth")
    p.add_argument("--renders", required=True, help="Directory of rendered images")
    p.add_argument("--gt", required=True, help="Directory of ground-truth images")
    p.add_argument("--out", required=True, help="Output directory for eval.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="Traversal throughput across chunk sizes and blend floors")
    p.add_argument("--scene", required=True, help="scene.json with base (and optionally env) sets")
    p.add_argument("--k", type=lambda v: parse_list(v, int), default=[1, 16], help="Comma-separated chunk sizes")
    p.add_argument("--floors", type=lambda v: parse_list(v, float), default=[0.0, 0.9],
                   help="Comma-separated blend floors for reflected rays")
    p.add_argument("--rays", type=int, help="Number of primary rays from the first camera (default all)")
    p.add_argument("--threads", type=int, default=1, help="Worker processes")
    p.add_argument("--out", required=True, help="Output directory for bench.csv")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="Write a procedural test scene")
    p.add_argument("--name", required=True, choices=SYNTHETIC_SCENES, help="Scene generator")
    p.add_argument("--seed", type=int, default=0, help="Random seed")
    p.add_argument("--views", type=int, default=4, help="Number of cameras")
    p.add_argument("--width", type=int, default=32, help="Image width")
    p.add_argument("--height", type=int, default=32, help="Image height")
    p.add_argument("--threads", type=int, default=1, help="Worker processes for the ground-truth renders")
    p.add_argument("--env-distance", type=float, default=3.0,
                   help="Distance of the environment emitters from the origin")
    p.add_argument("--with-sets", action="store_true", help="Include the ground-truth base/env PLYs")
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("config", help="Create a training config interactively")
    p.add_argument("--out", default="config.json", help="Path of the config file to write")
    p.set_defaults(func=cmd_config)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    """
    Parses arguments and runs a subcommand.

    Returns:
        int: 0 on success, 2 for configuration errors, 3 for missing or malformed data,
        4 for numerical failures.
    """
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as e:
        console.print(f"[bold red]Config error:[/] {describe_validation_error(e)}")
        return EXIT_CONFIG
    except ConfigError as e:
        console.print(f"[bold red]Config error:[/] {e}")
        return EXIT_CONFIG
    except (FileNotFoundError, DataError) as e:
        console.print(f"[bold red]Data error:[/] {e}")
        return EXIT_DATA
    except NumericalError as e:
        console.print(f"[bold red]Numerical failure:[/] {e}")
        return EXIT_NUMERICAL
