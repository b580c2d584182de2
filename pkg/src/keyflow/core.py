"""Domain types, keyframe ingestion, joint normalization and point-file IO."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

WEIGHT_TOL = 1e-9


class KeyframeError(ValueError):
    """Raised for malformed keyframe input."""


@dataclass(frozen=True, eq=False)
class PointCloud:
    """Weighted finite sample of a measure on R^d (d = 2 or 3)."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True)
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("point cloud needs at least one point as an (n, d) array")
        if pts.shape[1] not in (2, 3):
            raise ValueError(f"dimension must be 2 or 3, got {pts.shape[1]}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("non-finite coordinates")
        w = np.array(self.weights, dtype=np.float64, copy=True).reshape(-1)
        if w.shape[0] != pts.shape[0]:
            raise ValueError("weights and points differ in length")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise ValueError(f"weights must sum to 1, got {w.sum()!r}")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "PointCloud":
        pts = np.asarray(points, dtype=np.float64)
        n = pts.shape[0]
        return cls(pts, np.full(n, 1.0 / n))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def with_points(self, points) -> "PointCloud":
        return PointCloud(points, self.weights)

    def equals(self, other: "PointCloud") -> bool:
        return (
            self.points.shape == other.points.shape
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.weights, other.weights)
        )


@dataclass(frozen=True)
class Normalization:
    """Uniform scale about a center: normalized = (raw - center) * scale."""

    center: np.ndarray
    scale: float

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=np.float64) - self.center) * self.scale

    def invert(self, pts: np.ndarray) -> np.ndarray:
        return np.asarray(pts, dtype=np.float64) / self.scale + self.center

    @classmethod
    def identity(cls, d: int) -> "Normalization":
        return cls(np.zeros(d), 1.0)

    @classmethod
    def fit(cls, clouds: Iterable[np.ndarray]) -> "Normalization":
        """Longest bounding-box axis maps onto [-1, 1]; aspect ratio is kept."""
        allpts = np.concatenate([np.asarray(c, dtype=np.float64) for c in clouds], axis=0)
        lo, hi = allpts.min(axis=0), allpts.max(axis=0)
        center = 0.5 * (lo + hi)
        extent = float(np.max(hi - lo))
        scale = 2.0 / extent if extent > 0 else 1.0
        return cls(center, scale)


@dataclass(frozen=True)
class Keyframe:
    pool: PointCloud
    timestamp: float

    def __post_init__(self):
        if not math.isfinite(self.timestamp):
            raise KeyframeError("keyframe timestamp must be finite")


@dataclass(frozen=True)
class KeyframeSequence:
    """Keyframes in normalized scene coordinates plus the shared normalization."""

    keyframes: tuple
    normalization: Normalization

    def __post_init__(self):
        kfs = tuple(self.keyframes)
        object.__setattr__(self, "keyframes", kfs)
        if len(kfs) < 2:
            raise KeyframeError("need at least two keyframes")
        times = [k.timestamp for k in kfs]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise KeyframeError("non-increasing timestamps")
        dims = {k.pool.dim for k in kfs}
        if len(dims) != 1:
            raise KeyframeError(f"mismatched dimensionality across keyframes: {sorted(dims)}")

    @property
    def T(self) -> int:
        return len(self.keyframes)

    @property
    def dim(self) -> int:
        return self.keyframes[0].pool.dim

    @property
    def times(self) -> list[float]:
        return [k.timestamp for k in self.keyframes]

    def interval_of(self, t: float) -> int:
        """Index i with t in [t_i, t_{i+1}] (last interval owns the final time)."""
        times = self.times
        if t < times[0] or t > times[-1]:
            raise ValueError(f"time {t} outside [{times[0]}, {times[-1]}]")
        for i in range(len(times) - 1):
            if t <= times[i + 1]:
                return i
        return len(times) - 2

    @classmethod
    def from_raw(cls, clouds: Sequence[PointCloud], timestamps: Sequence[float],
                 normalize: bool = True) -> "KeyframeSequence":
        if len(clouds) != len(timestamps):
            raise KeyframeError("number of point sets and timestamps differ")
        dims = {c.dim for c in clouds}
        if len(dims) != 1:
            raise KeyframeError(f"mismatched dimensionality across keyframes: {sorted(dims)}")
        if normalize:
            norm = Normalization.fit([c.points for c in clouds])
        else:
            norm = Normalization.identity(clouds[0].dim)
        kfs = [
            Keyframe(PointCloud(np.clip(norm.apply(c.points), -1.0, 1.0), c.weights), float(t))
            for c, t in zip(clouds, timestamps)
        ]
        return cls(tuple(kfs), norm)


ALL_LAMBDAS = ("rig", "div", "A", "curl", "cross", "grad", "vel", "acc", "jerk")


def _default_lambdas() -> dict:
    lam = {k: 0.0 for k in ALL_LAMBDAS}
    lam["jerk"] = 1e-2
    return lam


@dataclass(frozen=True)
class TrainConfig:
    """Every training hyperparameter; defaults follow the published setup."""

    epsilon: float = 1e-4
    tau: float = math.inf
    lambdas: dict = field(default_factory=_default_lambdas)
    curl_target: tuple = (0.0, 0.0, 0.0)
    # a d x d matrix (nested lists), "radial-penalize" or "radial-align"
    alignment_metric: object = "radial-penalize"
    n_initial: int = 300
    n_growth_factor: float = 4.0 ** (1.0 / 6.0)
    n_growth_interval: int = 50
    iterations: int = 300
    lr: float = 1e-4
    lr_min: float = 1e-7
    plateau_patience: int = 10
    plateau_threshold: float = 1e-4
    rff_count: int = 100
    rff_sigma: float | None = None  # None -> 3*pi/sqrt(d)
    cyclic_period: float | None = None
    hidden: tuple = (512, 512, 512)
    ode_steps_per_unit_time: int = 10
    mc_points: int = 30
    mc_times: int = 5
    seed: int = 0
    dtype: str = "float32"
    # Sinkhorn effort inside the training loop (see ot.SinkhornOptions)
    sinkhorn_scaling: float = 0.5
    sinkhorn_stage_iters: int = 1
    sinkhorn_max_iter: int = 24
    sinkhorn_newton: bool = False

    def __post_init__(self):
        lam = _default_lambdas()
        lam.update(dict(self.lambdas))
        unknown = set(lam) - set(ALL_LAMBDAS)
        if unknown:
            raise ValueError(f"unknown regularizer weights: {sorted(unknown)}")
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "curl_target", tuple(float(c) for c in self.curl_target))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0 (or inf)")
        if any(v < 0 for v in lam.values()):
            raise ValueError("regularizer weights must be nonnegative")
        if len(self.curl_target) != 3:
            raise ValueError("curl target must be a 3-vector")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.rff_count < 1:
            raise ValueError("rff_count must be >= 1")
        if self.n_initial < 1 or self.n_growth_interval < 1:
            raise ValueError("sample schedule must be positive")
        if self.ode_steps_per_unit_time < 1:
            raise ValueError("ode_steps_per_unit_time must be >= 1")
        if self.mc_points < 1 or self.mc_times < 1:
            raise ValueError("Monte Carlo counts must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.cyclic_period is not None and not self.cyclic_period > 0:
            raise ValueError("cyclic_period must be > 0")
        if not isinstance(self.alignment_metric, str):
            A = np.asarray(self.alignment_metric, dtype=np.float64)
            if A.ndim != 2 or A.shape[0] != A.shape[1]:
                raise ValueError("alignment metric must be a square matrix")
            if not np.allclose(A, A.T, atol=1e-12):
                raise ValueError("alignment metric must be symmetric")
            if np.linalg.eigvalsh(A).min() < -1e-12:
                raise ValueError("alignment metric must be positive semidefinite")
        elif self.alignment_metric not in ("radial-penalize", "radial-align"):
            raise ValueError(f"unknown alignment metric {self.alignment_metric!r}")

    def sigma_for(self, d: int) -> float:
        return self.rff_sigma if self.rff_sigma is not None else 3.0 * math.pi / math.sqrt(d)

    def to_dict(self) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            if isinstance(v, tuple):
                v = list(v)
            if isinstance(v, float) and math.isinf(v):
                v = "inf"
            out[k] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        if isinstance(d.get("tau"), str) or d.get("tau") is None:
            if "tau" in d:
                d["tau"] = math.inf if d["tau"] in (None, "inf", "infinity") else float(d["tau"])
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


ADVECTED = "advected"
BARYCENTER = "barycenter"
KEYFRAME = "keyframe"


@dataclass(frozen=True)
class Frame:
    time: float
    cloud: PointCloud
    kind: str
    interval: int


@dataclass(frozen=True)
class FrameSet:
    frames: tuple

    def __post_init__(self):
        frames = tuple(self.frames)
        object.__setattr__(self, "frames", frames)
        times = [f.time for f in frames]
        if any(b < a for a, b in zip(times, times[1:])):
            raise ValueError("frame times must be non-decreasing")

    def __len__(self):
        return len(self.frames)

    def __iter__(self):
        return iter(self.frames)

    def __getitem__(self, i):
        return self.frames[i]


# ---------------------------------------------------------------- file formats

def read_points(path) -> np.ndarray:
    """Parse a whitespace-separated point file ('#' comments, blank lines skipped)."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            try:
                row = [float(tok) for tok in s.split()]
            except ValueError:
                raise KeyframeError(f"{path}:{lineno}: unparseable line {s!r}") from None
            if rows and len(row) != len(rows[0]):
                raise KeyframeError(f"{path}:{lineno}: expected {len(rows[0])} coordinates, got {len(row)}")
            rows.append(row)
    if not rows:
        raise KeyframeError(f"{path}: empty file")
    pts = np.array(rows, dtype=np.float64)
    if pts.shape[1] not in (2, 3):
        raise KeyframeError(f"{path}: points must have 2 or 3 coordinates, got {pts.shape[1]}")
    return pts


def write_points(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float64)
    with open(path, "w") as fh:
        for row in pts:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


def write_ply(path, points: np.ndarray) -> None:
    """ASCII PLY containing only a vertex list."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[1] != 3:
        raise ValueError("PLY export needs 3D points")
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {pts.shape[0]}\n")
        fh.write("property double x\nproperty double y\nproperty double z\nend_header\n")
        for x, y, z in pts:
            fh.write(f"{x!r} {y!r} {z!r}\n")


def image_to_points(path, n: int, rng: np.random.Generator, mode: str = "intensity",
                    threshold: int = 128) -> np.ndarray:
    """Rejection-sample points from an 8-bit grayscale image (P2/P5 PGM).

    In ``intensity`` mode the gray value acts as unnormalized density; in
    ``binary`` mode pixels at or above ``threshold`` are uniformly filled.
    Pixel (row, col) covers [col, col+1] x [H-row-1, H-row] so +y points up.
    """
    from PIL import Image

    with Image.open(path) as im:
        img = np.asarray(im.convert("L"), dtype=np.float64)
    if mode == "intensity":
        density = img / 255.0
    elif mode == "binary":
        density = (img >= threshold).astype(np.float64)
    else:
        raise ValueError(f"unknown image sampling mode {mode!r}")
    if density.max() <= 0:
        raise KeyframeError(f"{path}: image has no mass")
    density = density / density.max()
    H, W = density.shape
    out = []
    have = 0
    while have < n:
        m = max(2 * (n - have), 64)
        rows = rng.integers(0, H, m)
        cols = rng.integers(0, W, m)
        keep = rng.random(m) < density[rows, cols]
        jitter = rng.random((m, 2))
        xy = np.stack([cols + jitter[:, 0], (H - 1 - rows) + jitter[:, 1]], axis=1)[keep]
        out.append(xy)
        have += xy.shape[0]
    return np.concatenate(out)[:n]


def load_keyframes(paths: Sequence, timestamps: Sequence[float], image_points: int = 4000,
                   image_mode: str = "intensity", seed: int = 0) -> KeyframeSequence:
    """Read keyframe files and normalize them jointly into [-1, 1]^d.

    ``.pgm``/``.png`` inputs are converted to point pools by rejection
    sampling; anything else is parsed as a plain-text point file.
    """
    paths = list(paths)
    if not paths:
        raise KeyframeError("no keyframe files given")
    if len(paths) != len(timestamps):
        raise KeyframeError(f"{len(paths)} files but {len(timestamps)} timestamps")
    ts = [float(t) for t in timestamps]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise KeyframeError("non-increasing timestamps")
    rng = np.random.default_rng(seed)
    clouds = []
    for p in paths:
        if not os.path.exists(p):
            raise KeyframeError(f"missing keyframe file: {p}")
        if str(p).lower().endswith((".pgm", ".png")):
            pts = image_to_points(p, image_points, rng, mode=image_mode)
        else:
            pts = read_points(p)
        clouds.append(PointCloud.uniform(pts))
    return KeyframeSequence.from_raw(clouds, ts)


# ---------------------------------------------------------------- sampling

def subsample(cloud: PointCloud, n: int, rng: np.random.Generator) -> PointCloud:
    """Draw ``n`` points with replacement proportionally to the weights."""
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = rng.choice(cloud.n, size=n, replace=True, p=cloud.weights)
    return PointCloud(cloud.points[idx], np.full(n, 1.0 / n))


def sample_count_schedule(iteration: int, config: TrainConfig) -> int:
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    k = iteration // config.n_growth_interval
    return int(math.floor(config.n_initial * config.n_growth_factor ** k + 0.5))
