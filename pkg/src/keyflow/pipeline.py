"""Frame generation, barycenter correction, trajectory tracing and file export."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .core import (ADVECTED, BARYCENTER, KEYFRAME, Frame, FrameSet, KeyframeSequence, PointCloud,
                   TrainConfig, load_keyframes, read_points, subsample, write_ply, write_points)
from .flow import DEFAULT_STEPS_PER_UNIT_TIME, flow
from .net import VelocityNet
from .ot import FAST, barycenter

TIME_SNAP = 1e-9


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BarycenterSettings:
    enabled: bool = True
    epsilon: float = 1e-4
    tau: float = math.inf
    unbalanced_intervals: tuple = ()     # intervals that use tau; all others are balanced
    steps: int = 200
    lr: float = 0.05

    def tau_for(self, interval: int) -> float:
        return self.tau if interval in self.unbalanced_intervals else math.inf


@dataclass(frozen=True)
class RenderSettings:
    resolution: int = 512
    k: int = 20
    samples_per_frame: int | None = None   # None: 4000 in 2D, 25000 in 3D
    format: str = "png"
    normalization: str = "frame"           # "frame" (per-frame max) or "global"

    def samples_for(self, d: int) -> int:
        if self.samples_per_frame is not None:
            return self.samples_per_frame
        return 4000 if d == 2 else 25000


@dataclass(frozen=True)
class RunConfig:
    keyframes: tuple                      # ((path, time), ...), paths absolute
    train: TrainConfig = field(default_factory=TrainConfig)
    fps: float = 24.0
    barycenter: BarycenterSettings = field(default_factory=BarycenterSettings)
    render: RenderSettings = field(default_factory=RenderSettings)
    out: str = "out"
    model: str = "out/model.kfn"
    image_points: int = 4000
    image_mode: str = "intensity"

    def __post_init__(self):
        if not self.fps >= 1:
            raise ConfigError("fps must be >= 1")
        if self.render.resolution < 16:
            raise ConfigError("resolution must be >= 16")
        if len(self.keyframes) < 2:
            raise ConfigError("need at least two keyframes")
        if self.render.format not in ("png", "pgm"):
            raise ConfigError("render format must be png or pgm")
        if self.render.normalization not in ("frame", "global"):
            raise ConfigError("render normalization must be 'frame' or 'global'")
        if self.barycenter.steps < 0 or not self.barycenter.lr > 0:
            raise ConfigError("barycenter steps must be >= 0 and lr > 0")

    def load_keyframes(self) -> KeyframeSequence:
        paths = [p for p, _ in self.keyframes]
        times = [t for _, t in self.keyframes]
        return load_keyframes(paths, times, self.image_points, self.image_mode, self.train.seed)


def _tau(v):
    if v is None or (isinstance(v, str) and v.lower() in ("inf", "infinity")):
        return math.inf
    return float(v)


def parse_run_config(doc: dict, base_dir=".") -> RunConfig:
    """Build a RunConfig from a JSON document; relative paths resolve against base_dir."""
    base = Path(base_dir)
    known = {"keyframes", "train", "fps", "barycenter", "render", "out", "model", "image_points", "image_mode"}
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        kfs = tuple((str(base / k["path"]), float(k["time"])) for k in doc["keyframes"])
    except (KeyError, TypeError) as e:
        raise ConfigError(f"keyframes must be a list of {{path, time}} objects ({e})") from None
    try:
        train = TrainConfig.from_dict(doc.get("train", {}))
        bc = dict(doc.get("barycenter", {}))
        if "tau" in bc:
            bc["tau"] = _tau(bc["tau"])
        if "unbalanced_intervals" in bc:
            bc["unbalanced_intervals"] = tuple(int(i) for i in bc["unbalanced_intervals"])
        bary = BarycenterSettings(**bc)
        render = RenderSettings(**doc.get("render", {}))
        out = str(base / doc.get("out", "out"))
        model = str(base / doc["model"]) if "model" in doc else str(Path(out) / "model.kfn")
        return RunConfig(kfs, train, float(doc.get("fps", 24.0)), bary, render, out, model,
                         int(doc.get("image_points", 4000)), str(doc.get("image_mode", "intensity")))
    except (TypeError, ValueError) as e:
        if isinstance(e, ConfigError):
            raise
        raise ConfigError(str(e)) from None


def load_run_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return parse_run_config(doc, path.parent)


def run_config_dict(cfg: RunConfig) -> dict:
    bary = asdict(cfg.barycenter)
    bary["tau"] = "inf" if math.isinf(bary["tau"]) else bary["tau"]
    bary["unbalanced_intervals"] = list(bary["unbalanced_intervals"])
    return {
        "keyframes": [{"path": p, "time": t} for p, t in cfg.keyframes],
        "train": cfg.train.to_dict(),
        "fps": cfg.fps,
        "barycenter": bary,
        "render": asdict(cfg.render),
        "out": cfg.out,
        "model": cfg.model,
        "image_points": cfg.image_points,
        "image_mode": cfg.image_mode,
    }


# ---------------------------------------------------------------- frames

def frame_times(keyframe_times, fps: float) -> list[float]:
    """Uniform grid at ``fps`` from the first keyframe, merged with every keyframe time."""
    t0, t1 = keyframe_times[0], keyframe_times[-1]
    count = int(math.floor((t1 - t0) * fps + TIME_SNAP))
    grid = [t0 + k / fps for k in range(count + 1)]
    out = sorted(set(grid) | set(keyframe_times))
    merged = []
    for t in out:
        # a grid time within TIME_SNAP of a keyframe collapses onto the keyframe
        snap = next((k for k in keyframe_times if abs(k - t) <= TIME_SNAP), None)
        t = snap if snap is not None else t
        if not merged or t != merged[-1]:
            merged.append(t)
    return merged


def _interval_samples(keyframes: KeyframeSequence, i: int, n: int, seed: int):
    a = subsample(keyframes.keyframes[i].pool, n, np.random.default_rng([seed, i, 0]))
    b = subsample(keyframes.keyframes[i + 1].pool, n, np.random.default_rng([seed, i, 1]))
    return a, b


def _advect(net: VelocityNet, cloud: PointCloud, t_from: float, t_to: float, spu: int) -> np.ndarray:
    with torch.no_grad():
        z = torch.tensor(cloud.points, dtype=net.dtype)
        return flow(net, z, [t_from, t_to], spu)[0].to(torch.float64).numpy()


def interval_frame(net, keyframes: KeyframeSequence, t: float, i: int, samples: int,
                   bary: BarycenterSettings | None, seed: int = 0,
                   steps_per_unit_time: int = DEFAULT_STEPS_PER_UNIT_TIME, record: dict | None = None) -> Frame:
    """One in-between frame at t inside interval i (not at a keyframe time)."""
    t0, t1 = keyframes.times[i], keyframes.times[i + 1]
    A, B = _interval_samples(keyframes, i, samples, seed)
    xa = PointCloud(_advect(net, A, t0, t, steps_per_unit_time), A.weights)
    if bary is None or not bary.enabled:
        return Frame(t, xa, ADVECTED, i)
    xb = PointCloud(_advect(net, B, t1, t, steps_per_unit_time), B.weights)
    res = barycenter(xa, xb, t1 - t, t - t0, bary.epsilon, bary.tau_for(i), init=xa,
                     descent_steps=bary.steps, descent_lr=bary.lr, opts=FAST, return_result=True)
    if record is not None:
        record.update(objective_initial=res.objective_history[0], objective_final=res.objective_history[-1],
                      steps_taken=res.steps_taken)
    return Frame(t, res.cloud, BARYCENTER, i)


def generate_frames(net: VelocityNet, keyframes: KeyframeSequence, fps: float,
                    bary: BarycenterSettings | None = None, samples: int | None = None, seed: int = 0,
                    steps_per_unit_time: int = DEFAULT_STEPS_PER_UNIT_TIME, times=None,
                    records: list | None = None) -> FrameSet:
    """Frames in normalized coordinates at the fps grid (plus every keyframe time).

    Each interval uses one fixed pair of subsamples, seeded by (seed,
    interval), so frames do not depend on the order they are computed in.
    """
    if samples is None:
        samples = 4000 if keyframes.dim == 2 else 25000
    ktimes = keyframes.times
    times = frame_times(ktimes, fps) if times is None else sorted(float(t) for t in times)
    frames = []
    for t in times:
        if t in ktimes:
            j = ktimes.index(t)
            frames.append(Frame(t, keyframes.keyframes[j].pool, KEYFRAME, min(j, keyframes.T - 2)))
            if records is not None:
                records.append({"time": t, "kind": KEYFRAME})
            continue
        i = keyframes.interval_of(t)
        rec = {"time": t}
        frames.append(interval_frame(net, keyframes, t, i, samples, bary, seed, steps_per_unit_time, rec))
        if records is not None:
            rec["kind"] = frames[-1].kind
            records.append(rec)
    return FrameSet(tuple(frames))


def trace_trajectories(net: VelocityNet, keyframes: KeyframeSequence, n_trace: int, times=None,
                       seed: int = 0, steps_per_unit_time: int = DEFAULT_STEPS_PER_UNIT_TIME):
    """Polylines of n_trace points of keyframe 0 advected through the whole animation.

    Returns (times, array (n_trace, len(times), d)) in normalized scene units.
    """
    if n_trace < 1:
        raise ValueError("n_trace must be >= 1")
    ktimes = keyframes.times
    if times is None:
        span = ktimes[-1] - ktimes[0]
        count = max(int(math.ceil(span * 20)), 1)
        times = [ktimes[0] + span * k / count for k in range(count + 1)]
    times = [float(t) for t in times]
    start = subsample(keyframes.keyframes[0].pool, n_trace, np.random.default_rng([seed, 99]))
    with torch.no_grad():
        z = torch.tensor(start.points, dtype=net.dtype)
        tail = flow(net, z, [ktimes[0]] + times, steps_per_unit_time).to(torch.float64).numpy()
    return times, np.transpose(tail, (1, 0, 2))


# ---------------------------------------------------------------- export

def export_frames(frames: FrameSet, keyframes: KeyframeSequence, out_dir, records: list | None = None) -> Path:
    """Write denormalized frames as ``frame_<index>_<time>.pts`` point files plus an index.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    norm = keyframes.normalization
    index = []
    for k, fr in enumerate(frames):
        pts = norm.invert(fr.cloud.points)
        stem = f"frame_{k:05d}_{fr.time:.6f}"
        name = stem + ".pts"
        write_points(out / name, pts)
        if pts.shape[1] == 3:
            write_ply(out / f"{stem}.ply", pts)
        entry = {"file": name, "time": fr.time, "kind": fr.kind, "interval": fr.interval}
        if records is not None and k < len(records):
            entry.update({key: v for key, v in records[k].items() if key not in entry})
        index.append(entry)
    (out / "index.json").write_text(json.dumps({"frames": index}, indent=1))
    return out


def read_frames(frame_dir) -> list[tuple[dict, np.ndarray]]:
    d = Path(frame_dir)
    idx = d / "index.json"
    if not idx.exists():
        raise FileNotFoundError(f"no index.json in {d}")
    entries = json.loads(idx.read_text())["frames"]
    return [(e, read_points(d / e["file"])) for e in entries]
