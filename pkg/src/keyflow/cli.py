"""Command line: keyflow {train,frames,render,trace,check}."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from .core import KeyframeError
from .flow import FlowError
from .net import load_net, save_net
from .pipeline import (ConfigError, export_frames, generate_frames, load_run_config, read_frames,
                       run_config_dict, trace_trajectories)
from .render import SceneBox, knn_bandwidths, splat, write_image
from .trainer import TrainingAborted, torch_dtype, train

EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_NUMERIC = 4


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def _emit(*cols) -> None:
    print("\t".join(str(c) for c in cols), flush=True)


def _config(args):
    cfg = load_run_config(args.config)
    train_cfg = cfg.train
    if args.seed is not None:
        train_cfg = train_cfg.replace(seed=args.seed)
    over = {"train": train_cfg}
    if args.out is not None:
        over["out"] = args.out
        over["model"] = str(Path(args.out) / "model.kfn")
    from dataclasses import replace
    return replace(cfg, **over)


def _model(path, dtype=torch.float64):
    if not Path(path).exists():
        raise CliError(f"model file not found: {path}", EXIT_CONFIG)
    try:
        return load_net(path, dtype)
    except (ValueError, OSError) as e:
        raise CliError(f"cannot read model {path}: {e}", EXIT_CONFIG) from None


def cmd_check(args) -> int:
    cfg = _config(args)
    kf = cfg.load_keyframes()
    _emit("T", kf.T)
    _emit("d", kf.dim)
    _emit("N0", cfg.train.n_initial)
    _emit("iterations", cfg.train.iterations)
    _emit("times", ",".join(f"{t:g}" for t in kf.times))
    _emit("pool_sizes", ",".join(str(k.pool.n) for k in kf.keyframes))
    _emit("lambdas", json.dumps({k: v for k, v in cfg.train.lambdas.items() if v > 0}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from .plotting import loss_curves

    cfg = _config(args)
    kf = cfg.load_keyframes()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    model = Path(cfg.model)
    model.parent.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(run_config_dict(cfg), indent=1, sort_keys=True))
    _emit("iter", "N", "lr", "fit", "total", "wall_ms")

    def progress(rec, wall):
        if not args.quiet:
            _emit(rec["iter"], rec["N"], f"{rec['lr']:.3e}", f"{rec['fit']:.6e}", f"{rec['total']:.6e}",
                  f"{wall:.0f}")

    net, hist = train(kf, cfg.train, telemetry_path=out / "telemetry.jsonl",
                      timing_path=out / "timing.jsonl", progress=progress)
    save_net(net, model)
    if hist:
        loss_curves(hist, out / "loss_curves.png")
    _emit("model", model)
    _emit("telemetry", out / "telemetry.jsonl")
    return 0


def cmd_frames(args) -> int:
    cfg = _config(args)
    kf = cfg.load_keyframes()
    net = _model(args.model)
    records: list = []
    frames = generate_frames(net, kf, cfg.fps, cfg.barycenter, cfg.render.samples_for(kf.dim), cfg.train.seed,
                             cfg.train.ode_steps_per_unit_time, records=records)
    out = export_frames(frames, kf, Path(cfg.out) / "frames", records)
    _emit("index", "time", "kind", "objective_initial", "objective_final")
    for k, r in enumerate(records):
        _emit(k, f"{r['time']:.6f}", r["kind"], r.get("objective_initial", ""), r.get("objective_final", ""))
    _emit("frames", out)
    return 0


def cmd_render(args) -> int:
    frames = read_frames(args.framedir) if Path(args.framedir).exists() else None
    if frames is None:
        raise CliError(f"frame directory not found: {args.framedir}", EXIT_CONFIG)
    out = Path(args.out) if args.out else Path(args.framedir).parent / "render"
    out.mkdir(parents=True, exist_ok=True)
    box = SceneBox.around(np.concatenate([p[:, :2] for _, p in frames]))
    rasters = []
    for entry, pts in frames:
        if pts.shape[1] != 2:
            raise CliError("render supports 2D frames only (3D frames are exported as PLY)", EXIT_CONFIG)
        k = min(args.k, pts.shape[0] - 1)
        bw = knn_bandwidths(pts, k) if k >= 1 else np.zeros(pts.shape[0])
        rasters.append(splat(pts, bw, args.res, box=box))
    scale = max(r.values.max() for r in rasters) if args.normalization == "global" else None
    _emit("index", "time", "mass", "file")
    for i, ((entry, _), r) in enumerate(zip(frames, rasters)):
        path = out / f"frame_{i:05d}.{args.format}"
        write_image(r, path, args.format, scale)
        _emit(i, f"{entry['time']:.6f}", f"{r.mass:.6f}", path)
    return 0


def cmd_trace(args) -> int:
    from .plotting import trajectory_overlay

    cfg = _config(args)
    kf = cfg.load_keyframes()
    net = _model(args.model)
    times, lines = trace_trajectories(net, kf, args.n, seed=cfg.train.seed,
                                      steps_per_unit_time=cfg.train.ode_steps_per_unit_time)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if kf.dim == 2:
        trajectory_overlay(lines, kf, out / "trajectories.png")
    with open(out / "trajectories.tsv", "w") as fh:
        fh.write("path\ttime\t" + "\t".join("xyz"[: kf.dim]) + "\n")
        for p, line in enumerate(lines):
            for t, z in zip(times, line):
                fh.write(f"{p}\t{t:.6f}\t" + "\t".join(f"{c:.9g}" for c in z) + "\n")
    chord = np.linalg.norm(lines[:, -1] - lines[:, 0], axis=1)
    length = np.linalg.norm(np.diff(lines, axis=1), axis=2).sum(1)
    _emit("paths", len(lines))
    _emit("mean_length", f"{length.mean():.6f}")
    _emit("mean_chord_ratio", f"{np.mean(chord / np.maximum(length, 1e-12)):.6f}")
    _emit("figure", out / "trajectories.png" if kf.dim == 2 else "")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the training seed")
    common.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 = reproducible)")
    common.add_argument("--out", default=None, help="output directory")
    p = argparse.ArgumentParser(prog="keyflow", description="Keyframe interpolation of point clouds")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("train", parents=[common], help="train a velocity field")
    s.add_argument("config")
    s.add_argument("--quiet", action="store_true")
    s = sub.add_parser("frames", parents=[common], help="write in-between frames")
    s.add_argument("model")
    s.add_argument("config")
    s = sub.add_parser("render", parents=[common], help="splat frames into images")
    s.add_argument("framedir")
    s.add_argument("--res", type=int, default=512)
    s.add_argument("--k", type=int, default=20)
    s.add_argument("--format", choices=("png", "pgm"), default="png")
    s.add_argument("--normalization", choices=("frame", "global"), default="frame")
    s = sub.add_parser("trace", parents=[common], help="trajectory overlay figure")
    s.add_argument("model")
    s.add_argument("config")
    s.add_argument("--n", type=int, default=64, help="number of traced points")
    s = sub.add_parser("check", parents=[common], help="validate a config")
    s.add_argument("config")
    return p


COMMANDS = {"train": cmd_train, "frames": cmd_frames, "render": cmd_render, "trace": cmd_trace,
            "check": cmd_check}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    torch.set_num_threads(max(1, args.threads))
    try:
        return COMMANDS[args.command](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ConfigError, KeyframeError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (FlowError, TrainingAborted) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
