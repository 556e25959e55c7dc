"""Command-line surface.

Subcommands: synth, densify, map, render, eval, bench, verify. Exit codes:
0 success, 1 input error, 2 internal error. Usage errors print the synopsis
to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import formats, verify
from .config import PipelineConfig
from .errors import ParseError, VoxsplatError
from .gpr import GprProblem, densify_frame, gpr_solve, gpr_solve_batch
from .losses import psnr, ssim
from .pipeline import run
from .renderer import render
from .scene import ground_truth_image, scene_from_pairs, simulate_scan
from .voxel_map import PointCloud, VoxelMap


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="voxsplat",
                     description="per-voxel regression densification and splat mapping")
    parser.add_argument("--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a frame stream from a scene config")
    p.add_argument("--config", required=True, help="scene config file")
    p.add_argument("--out", required=True, help="output stream directory")

    p = sub.add_parser("densify", help="densify one PLY through the voxel solver")
    p.add_argument("input", help="input PLY point cloud")
    p.add_argument("--out", required=True, help="output PLY of predicted points")
    p.add_argument("--config", help="pipeline config file")
    p.add_argument("--stats", action="store_true", help="print per-voxel lines")

    p = sub.add_parser("map", help="run the mapping pipeline over a stream")
    p.add_argument("stream", help="stream directory from synth")
    p.add_argument("--out", required=True, help="output map file")
    p.add_argument("--config", help="pipeline config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--report", help="line-delimited report destination "
                                    "(default: <out>.reports.jsonl)")

    p = sub.add_parser("render", help="render a map file to C/D/S images")
    p.add_argument("map", help="map file")
    p.add_argument("--config", required=True,
                   help="camera config: camera= and pose= lines")
    p.add_argument("--out", required=True, help="output prefix")

    p = sub.add_parser("eval", help="PSNR/SSIM between two images")
    p.add_argument("image_a")
    p.add_argument("image_b")

    p = sub.add_parser("bench", help="batched vs sequential solver timings")
    p.add_argument("--problems", type=int, default=1000)
    p.add_argument("--n", type=int, default=32, help="training points per problem")
    p.add_argument("--nstar", type=int, default=81, help="query points per problem")
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("verify", help="run the built-in oracle checks")
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False)
                        else logging.WARNING)
    try:
        return _dispatch(args)
    except (ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VoxsplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # internal failure
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    return {
        "synth": _cmd_synth, "densify": _cmd_densify, "map": _cmd_map,
        "render": _cmd_render, "eval": _cmd_eval, "bench": _cmd_bench,
        "verify": _cmd_verify,
    }[args.command](args)


def _load_config(path, overrides=None) -> PipelineConfig:
    return formats.read_pipeline_config(path, overrides)


# ---------------------------------------------------------------------------

def _cmd_synth(args) -> int:
    pairs = formats.read_config_pairs(args.config)
    spec = scene_from_pairs(pairs, path=args.config)
    from .pipeline import FrameSample
    frames = []
    for i, cam in enumerate(spec.cameras):
        frames.append(FrameSample(timestamp=float(i),
                                  points=simulate_scan(spec, i),
                                  image=ground_truth_image(spec, cam),
                                  camera=cam))
    echo = [f"{k}={v}" for _, k, v in pairs if k not in ("camera",)]
    formats.write_stream(args.out, frames, scene_lines=echo)
    print(f"wrote {len(frames)} frames to {args.out}")
    return 0


def _cmd_densify(args) -> int:
    config = _load_config(args.config)
    cloud = formats.read_ply(args.input)
    vmap = VoxelMap.from_config(config)
    update = vmap.store_frame(cloud)
    predictions = densify_frame(update, vmap, config)
    out_positions = (np.concatenate([p.positions for p in predictions])
                     if predictions else np.empty((0, 3)))
    out_colors = (np.concatenate([p.colors for p in predictions])
                  if predictions else np.empty((0, 3)))
    out_vars = (np.concatenate([p.variances for p in predictions])
                if predictions else np.empty(0))
    formats.write_ply(args.out, PointCloud(out_positions, out_colors, out_vars))
    print(f"voxels touched {len(update)}, solved {len(predictions)}, "
          f"predicted points {len(out_positions)}")
    if args.stats:
        for pred in predictions:
            cell = vmap.cells[pred.key]
            print(f"voxel {tuple(pred.key)} state={cell.state.name} "
                  f"points={cell.point_count} "
                  f"mean_var={pred.mean_variance:.6f}")
    return 0


def _cmd_map(args) -> int:
    overrides = {"seed": str(args.seed)} if args.seed is not None else None
    config = _load_config(args.config, overrides)
    frames = formats.read_stream(args.stream)
    result = run(frames, config)
    formats.write_map(args.out, result.gmap, config)
    report_path = args.report or (str(args.out) + ".reports.jsonl")
    with open(report_path, "w", encoding="ascii") as fh:
        for report in result.reports:
            fh.write(formats.report_to_json_line(report.to_dict()) + "\n")
    m = result.metrics
    print(f"frames {m['frames']}, voxels {m['voxels']} "
          f"({m['converged_voxels']} converged), primitives {m['primitives']}")
    print(f"PSNR mean {m['mean_psnr']:.2f} dB final {m['final_psnr']:.2f} dB, "
          f"SSIM mean {m['mean_ssim']:.4f} final {m['final_ssim']:.4f}")
    return 0


def _cmd_render(args) -> int:
    gmap, _ = formats.read_map(args.map)
    pairs = formats.read_config_pairs(args.config)
    intrinsics = None
    pose = None
    for lineno, key, value in pairs:
        if key == "camera":
            tok = value.split()
            intrinsics = dict(fx=float(tok[0]), fy=float(tok[1]),
                              cx=float(tok[2]), cy=float(tok[3]),
                              width=int(tok[4]), height=int(tok[5]))
        elif key == "pose":
            pose = [float(v) for v in value.split()]
    if intrinsics is None or pose is None:
        raise ParseError(args.config, "end of file",
                         "render config needs camera= and pose= lines")
    camera = formats.camera_from_pose(intrinsics, pose[0:3], pose[3:7],
                                      path=args.config)
    buffers = render(gmap, camera)
    prefix = Path(args.out)
    formats.write_image(prefix.with_name(prefix.name + "_color.png"),
                        np.clip(buffers.color, 0.0, 1.0))
    d = buffers.depth
    dmax = d.max()
    formats.write_image(prefix.with_name(prefix.name + "_depth.png"),
                        d / dmax if dmax > 0 else d)
    formats.write_image(prefix.with_name(prefix.name + "_silhouette.png"),
                        buffers.silhouette)
    print(f"rendered {len(gmap)} primitives to {prefix.name}_{{color,depth,"
          f"silhouette}}.png")
    return 0


def _cmd_eval(args) -> int:
    a = formats.read_image(args.image_a)
    b = formats.read_image(args.image_b)
    print(f"PSNR {psnr(a, b):.2f} dB, SSIM {ssim(a, b):.4f}")
    return 0


def _cmd_bench(args) -> int:
    rng = np.random.default_rng(args.seed)
    problems = []
    for _ in range(args.problems):
        x = rng.uniform(0, 0.2, size=(args.n, 2))
        f = rng.normal(0, 0.1, size=args.n)
        noise = rng.uniform(1e-4, 0.1, size=args.n)
        xs = rng.uniform(0, 0.2, size=(args.nstar, 2))
        problems.append(GprProblem(x=x, f=f, noise_diag=noise, x_star=xs))

    t0 = time.perf_counter()
    for problem in problems:
        gpr_solve(problem)
    seq_s = time.perf_counter() - t0

    t0 = time.perf_counter()
    batch = gpr_solve_batch(problems, workers=args.workers)
    par_s = time.perf_counter() - t0
    if not batch.ok:
        raise VoxsplatError(f"benchmark batch failed: {batch.errors[:3]}")

    header = f"{'path':<12}{'problems':>10}{'total s':>12}{'per-problem ms':>18}"
    print(header)
    print("-" * len(header))
    for name, secs in (("sequential", seq_s), ("batched", par_s)):
        print(f"{name:<12}{args.problems:>10}{secs:>12.4f}"
              f"{1000.0 * secs / args.problems:>18.4f}")
    return 0


def _cmd_verify(args) -> int:
    failures = verify.run_checks(seed=args.seed, stream=sys.stdout)
    return 0 if failures == 0 else 2


if __name__ == "__main__":
    sys.exit(main())
