"""Command-line entry points.

Every experiment parameter lives in the config file; flags choose the
command and the input/output paths (plus a few evaluation knobs such as
grid resolution).

Exit codes: 0 success, 2 bad input, 3 numerical divergence. Set
``CNM_NUM_THREADS`` to cap the number of CPU threads.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import evaluation as ev
from .field import DivergenceError, load_checkpoint
from .geometry import Intrinsics, SurfaceSampleSet, frame_samples
from .scene import (ParseError, TRANSFORM_TAG, load_manifest, load_scene, look_at, orbit_poses,
                    render_sequence, transform_from_bytes, write_sequence)
from .trainer import (MODES, TrainConfig, load_config, prepare_samples, resolve_transform, run_sequence)

log = logging.getLogger("cnm")

EXIT_OK, EXIT_BAD_INPUT, EXIT_DIVERGED = 0, 2, 3
THREADS_ENV = "CNM_NUM_THREADS"


class InputError(Exception):
    """Bad or inconsistent user input (exit code 2)."""


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _apply_thread_override() -> None:
    value = os.environ.get(THREADS_ENV)
    if not value:
        return
    try:
        n = int(value)
    except ValueError:
        raise InputError(f"{THREADS_ENV} must be an integer, got '{value}'") from None
    if n < 1:
        raise InputError(f"{THREADS_ENV} must be at least 1")
    import torch
    torch.set_num_threads(n)


def _run_config(ckpts: Path, config: Optional[str]) -> TrainConfig:
    path = Path(config) if config else ckpts / "config.txt"
    if not path.exists():
        raise InputError(f"config not found: {path}")
    return load_config(path)


def _load_checkpoints(ckpts: Path, cfg: TrainConfig):
    paths = sorted(ckpts.glob("theta_*.cnm"))
    if not paths:
        raise InputError(f"no checkpoints (theta_*.cnm) in {ckpts}")
    nets, transform = [], None
    for p in paths:
        net, sections = load_checkpoint(p)
        if net.dims != cfg.dims:
            raise InputError(f"{p}: network dims {net.dims} do not match config dims {cfg.dims}")
        nets.append(net)
        if TRANSFORM_TAG in sections:
            transform = transform_from_bytes(sections[TRANSFORM_TAG])
    return nets, transform


def _processed_frames(manifest, cfg: TrainConfig):
    return [f for k, f in enumerate(manifest.frames()) if k % cfg.frame_stride == 0]


def _eval_context(args):
    ckpts = Path(args.ckpts)
    if not ckpts.is_dir():
        raise InputError(f"checkpoint directory not found: {ckpts}")
    cfg = _run_config(ckpts, args.config)
    nets, transform = _load_checkpoints(ckpts, cfg)
    manifest = load_manifest(args.data) if getattr(args, "data", None) else None
    if transform is None:
        transform = resolve_transform(cfg, None if manifest is None else manifest.bbox)
    return cfg, nets, transform, manifest


def _bbox(cfg: TrainConfig, manifest, transform=None) -> np.ndarray:
    if cfg.bbox is not None:
        return np.asarray(cfg.bbox, dtype=np.float64).reshape(2, 3)
    if manifest is not None and manifest.bbox is not None:
        return np.asarray(manifest.bbox, dtype=np.float64)
    if transform is not None:
        # the whole normalized domain [-1, 1]^3 expressed in meters
        return transform.invert(np.array([[-1.0] * 3, [1.0] * 3]))
    raise InputError("a bounding box is required (config 'bbox' or manifest)")


def _pick(nets, t: int):
    if not -len(nets) <= t < len(nets):
        raise InputError(f"checkpoint index {t} out of range (have {len(nets)})")
    return t % len(nets)


def _sibling(path: Path, suffix: str, tag: str = "") -> Path:
    return path.with_name(path.stem + tag + suffix)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    scene = load_scene(args.scene)
    if args.frames < 0:
        raise InputError("--frames must be non-negative")
    bbox = scene.bbox if scene.bbox is not None else np.array([[-1.0] * 3, [1.0] * 3])
    center = bbox.mean(axis=0)
    extent = bbox[1] - bbox[0]
    K = Intrinsics(0.875 * args.width, 0.875 * args.width, (args.width - 1) / 2, (args.height - 1) / 2,
                   args.width, args.height)
    if args.traj == "orbit":
        poses = orbit_poses(center, 0.3 * extent[:2].min(), 0.0, args.frames)
    else:
        y = center[1] - 0.3 * extent[1]
        xs = np.linspace(center[0] - 0.3 * extent[0], center[0] + 0.3 * extent[0], max(args.frames, 1))
        poses = [look_at((x, y, center[2]), (x, y + 1.0, center[2])) for x in xs][:args.frames]
    try:
        frames = render_sequence(scene, K, poses)
    except ValueError as exc:
        raise InputError(f"cannot render the requested path: {exc}") from exc
    manifest = write_sequence(args.out, frames, bbox)
    print(f"wrote {len(manifest)} frames to {args.out}")
    return EXIT_OK


def _train(args, mode: str) -> int:
    from .plotting import plot_losses

    cfg = load_config(args.config)
    manifest = load_manifest(args.data)
    result = run_sequence(cfg, manifest.frames(), mode=mode, out_dir=args.out, bbox=manifest.bbox)
    rows = [{"frame": t, **row} for t, r in enumerate(result.reports) for row in r.epochs]
    plot_losses(rows, Path(args.out) / "losses.png")
    print(f"{mode}: {len(result.checkpoints)} checkpoints in {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _train(args, "replay")


def cmd_baseline(args) -> int:
    return _train(args, args.mode)


def cmd_heatmap(args) -> int:
    from .plotting import plot_heatmap

    cfg, nets, transform, manifest = _eval_context(args)
    frames = _processed_frames(manifest, cfg)
    if len(frames) != len(nets):
        raise InputError(f"{len(nets)} checkpoints but {len(frames)} processed frames in {args.data}")
    pts = [prepare_samples(f, cfg, transform).points for f in frames]
    hm = ev.sdf_error_heatmap(nets, pts, transform.scale)
    out = Path(args.out)
    ev.write_matrix_csv(out, hm.mean)
    ev.write_matrix_csv(_sibling(out, ".csv", "_std"), hm.std)
    ev.write_matrix_csv(_sibling(out, ".csv", "_normalized"), hm.mean * transform.scale)
    plot_heatmap(hm.mean, _sibling(out, ".png"), std=hm.std)
    mean, std = hm.memory_summary()
    print(f"memory triangle: mean {mean:.6g} m, std {std:.6g} m")
    return EXIT_OK


def cmd_forget(args) -> int:
    from .plotting import plot_forgetting

    cfg, nets, transform, manifest = _eval_context(args)
    frames = _processed_frames(manifest, cfg)
    if not frames:
        raise InputError(f"no frames in {args.data}")
    pts0 = prepare_samples(frames[0], cfg, transform).points
    curve = ev.forgetting_curve(nets, pts0, args.threshold)
    out = Path(args.out)
    ev.write_curve_csv(out, curve)
    plot_forgetting({cfg_label(args.ckpts): curve}, _sibling(out, ".png"), args.threshold)
    print("fraction |f| < %g: " % args.threshold + " ".join(f"{v:.3f}" for v in curve))
    return EXIT_OK


def cfg_label(ckpts) -> str:
    return Path(ckpts).resolve().name


def cmd_mesh(args) -> int:
    cfg, nets, transform, manifest = _eval_context(args)
    t = _pick(nets, args.t)
    bbox = _bbox(cfg, manifest, transform)
    observed = np.zeros((0, 3))
    if manifest is not None:
        frames = _processed_frames(manifest, cfg)[:t + 1]
        sets = [frame_samples(f, cfg.pixel_stride, cfg.max_depth_jump) for f in frames]
        observed = SurfaceSampleSet.concatenate(sets).points if sets else observed
    elif args.mask:
        raise InputError("--mask needs --data to know which space was observed")
    if args.mask:
        mask = ev.aligned_mask(observed, bbox, args.res, args.voxel_cells)
        if len(mask) == 0:
            log.warning("no observed points; masked mesh is empty")
        mesh = ev.masked_extract_mesh(nets[t], bbox, args.res, mask, transform)
    else:
        mesh = ev.extract_mesh(nets[t], bbox, args.res, transform)
    ev.write_ply(args.out, mesh)
    msg = f"{len(mesh)} triangles written to {args.out}"
    if len(mesh) and len(observed):
        mean, std = ev.mesh_to_cloud_error(mesh, observed)
        msg += f"; cloud/mesh error vs observations {mean:.6g} m (std {std:.6g})"
    print(msg)
    return EXIT_OK


def cmd_slice(args) -> int:
    from .plotting import plot_slice

    cfg, nets, transform, manifest = _eval_context(args)
    t = _pick(nets, args.t)
    bbox = _bbox(cfg, manifest, transform)
    try:
        raster = ev.export_sdf_slice(nets[t], bbox, args.axis, args.offset, args.res, transform)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.out)
    ev.write_pgm16(out, ev.slice_to_gray16(raster, args.limit))
    np.savetxt(_sibling(out, ".csv"), raster, delimiter=",", fmt="%.9g")
    k = ev.AXES[args.axis]
    a, b = [i for i in range(3) if i != k]
    plot_slice(raster, (bbox[0, a], bbox[1, a], bbox[0, b], bbox[1, b]), _sibling(out, ".png"),
               args.limit, args.axis)
    print(f"{args.res}x{args.res} slice written to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cnm", description="Continual neural mapping: train and evaluate "
                                "an implicit signed-distance network on a stream of depth frames.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    s = sub.add_parser("synth", help="render a synthetic depth sequence from a scene file")
    s.add_argument("--scene", required=True, help="scene description file")
    s.add_argument("--frames", type=int, required=True, help="number of frames to render")
    s.add_argument("--traj", choices=("orbit", "line"), default="orbit",
                   help="camera path: circle around the scene centre or a lateral sweep")
    s.add_argument("--width", type=int, default=80, help="image width in pixels (default 80)")
    s.add_argument("--height", type=int, default=60, help="image height in pixels (default 60)")
    s.add_argument("--out", required=True, help="output sequence directory")
    s.set_defaults(func=cmd_synth)

    for name, helptext, func in (("train", "continual training with experience replay", cmd_train),
                                 ("baseline", "train a comparison baseline", cmd_baseline)):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--config", required=True, help="training config file (key = value)")
        t.add_argument("--data", required=True, help="sequence directory or manifest file")
        t.add_argument("--out", required=True, help="run directory for checkpoints and reports")
        if name == "baseline":
            t.add_argument("--mode", required=True, choices=[m for m in MODES if m != "replay"],
                           help="finetune: no replay; retrain: from scratch on all frames; "
                                "reinit: fresh network per frame, buffer kept")
        t.set_defaults(func=func)

    def eval_parser(name, helptext, func, data_required=True):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--ckpts", required=True, help="run directory holding theta_*.cnm")
        e.add_argument("--data", required=data_required, help="sequence directory or manifest file")
        e.add_argument("--config", help="config file (default: <ckpts>/config.txt)")
        e.add_argument("--out", required=True, help="output file")
        e.set_defaults(func=func)
        return e

    eval_parser("heatmap", "mean/std |f| of every frame under every checkpoint (CSV + PNG)", cmd_heatmap)
    f = eval_parser("forget", "fraction of first-frame points with |f| below a threshold (CSV + PNG)", cmd_forget)
    f.add_argument("--threshold", type=float, default=0.01, help="threshold in normalized units (default 0.01)")
    m = eval_parser("mesh", "marching-cubes mesh of a checkpoint (ASCII PLY)", cmd_mesh, data_required=False)
    m.add_argument("--res", type=int, default=64, help="grid samples along the longest bbox axis (default 64)")
    m.add_argument("--mask", action="store_true", help="only keep triangles in voxels near observed points")
    m.add_argument("--voxel-cells", type=int, default=1, help="mask voxel size in grid cells (default 1)")
    m.add_argument("--t", type=int, default=-1, help="checkpoint index (default: last)")
    sl = eval_parser("slice", "axis-aligned SDF slice (16-bit PGM + CSV + PNG)", cmd_slice, data_required=False)
    sl.add_argument("--axis", choices=("x", "y", "z"), default="z", help="slice normal axis (default z)")
    sl.add_argument("--offset", type=float, default=0.0, help="plane position in meters (default 0)")
    sl.add_argument("--res", type=int, default=128, help="raster side length (default 128)")
    sl.add_argument("--limit", type=float, default=0.5,
                    help="gray mapping: -limit -> 0, 0 -> 32768, +limit -> 65535 (meters, default 0.5)")
    sl.add_argument("--t", type=int, default=-1, help="checkpoint index (default: last)")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_thread_override()
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, ParseError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
