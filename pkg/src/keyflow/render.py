"""Density images by Gaussian splatting with kNN-adaptive bandwidths."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import erf

TRUNCATE = 4.0      # kernel support in standard deviations
MIN_RESOLUTION = 16


def knn_bandwidths(points, k: int = 20) -> np.ndarray:
    """Distance from every point to its k-th nearest other point."""
    pts = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if pts.shape[0] <= k:
        raise ValueError(f"need at least {k + 1} points for k={k}, got {pts.shape[0]}")
    # the query point itself comes back first at distance 0
    dist, _ = cKDTree(pts).query(pts, k=k + 1)
    return dist[:, k].copy()


@dataclass(frozen=True)
class SceneBox:
    """Axis-aligned scene window mapped onto the raster (y up in the scene)."""

    xmin: float
    ymin: float
    size: float     # square window side length

    @classmethod
    def around(cls, points, margin: float = 0.1) -> "SceneBox":
        pts = np.asarray(points, dtype=np.float64)
        lo, hi = pts[:, :2].min(0), pts[:, :2].max(0)
        side = float(max(hi - lo)) or 1.0
        side *= 1.0 + 2.0 * margin
        c = 0.5 * (lo + hi)
        return cls(float(c[0] - side / 2), float(c[1] - side / 2), side)

    def to_pixels(self, points, resolution: int) -> np.ndarray:
        """Continuous pixel coordinates (column, row) with row 0 at the top."""
        pts = np.asarray(points, dtype=np.float64)
        s = resolution / self.size
        col = (pts[:, 0] - self.xmin) * s
        row = resolution - (pts[:, 1] - self.ymin) * s
        return np.stack([col, row], axis=1)


@dataclass
class Raster:
    width: int
    height: int
    values: np.ndarray          # (height, width), row 0 at the top
    box: SceneBox | None = None

    @property
    def mass(self) -> float:
        return float(self.values.sum())


def _axis_mass(center: float, sigma: float, n: int):
    """Gaussian mass per unit cell [j, j+1) within the truncated support; (start, weights)."""
    lo = max(int(math.floor(center - TRUNCATE * sigma)), 0)
    hi = min(int(math.ceil(center + TRUNCATE * sigma)), n)
    if hi <= lo:
        return lo, np.zeros(0)
    edges = (np.arange(lo, hi + 1, dtype=np.float64) - center) / (math.sqrt(2.0) * sigma)
    cdf = 0.5 * erf(edges)
    return lo, np.diff(cdf)


def splat_pixels(pixels, sigmas, weights, width: int, height: int) -> np.ndarray:
    """Accumulate mass-normalized Gaussians given in pixel units."""
    img = np.zeros((height, width))
    for (cx, cy), s, w in zip(np.asarray(pixels, dtype=np.float64), np.asarray(sigmas, dtype=np.float64),
                              np.asarray(weights, dtype=np.float64)):
        if s <= 0.0:
            # degenerate bandwidth: whole mass into the containing pixel
            c, r = int(math.floor(cx)), int(math.floor(cy))
            if 0 <= c < width and 0 <= r < height:
                img[r, c] += w
            continue
        c0, wx = _axis_mass(cx, s, width)
        r0, wy = _axis_mass(cy, s, height)
        if wx.size and wy.size:
            img[r0:r0 + wy.size, c0:c0 + wx.size] += w * np.outer(wy, wx)
    return img


def splat(points, bandwidths, resolution: int, weights=None, box: SceneBox | None = None) -> Raster:
    """Square raster of Gaussian kernels with per-point std = bandwidth (scene units)."""
    if resolution < MIN_RESOLUTION:
        raise ValueError(f"resolution must be >= {MIN_RESOLUTION}")
    pts = np.asarray(points, dtype=np.float64)
    bw = np.asarray(bandwidths, dtype=np.float64)
    if pts.shape[0] != bw.shape[0]:
        raise ValueError("points and bandwidths differ in length")
    if weights is None:
        weights = np.full(pts.shape[0], 1.0 / max(pts.shape[0], 1))
    if box is None:
        box = SceneBox.around(pts) if pts.size else SceneBox(-1.0, -1.0, 2.0)
    scale = resolution / box.size
    img = splat_pixels(box.to_pixels(pts, resolution), bw * scale, weights, resolution, resolution)
    return Raster(resolution, resolution, img, box)


def to_bytes(raster: Raster, scale: float | None = None) -> np.ndarray:
    """8-bit image: values / scale (default: the raster max) mapped onto 0..255."""
    v = raster.values
    top = float(v.max()) if scale is None else float(scale)
    if top <= 0.0:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.clip(np.rint(v / top * 255.0), 0, 255).astype(np.uint8)


def write_image(raster: Raster, path, format: str | None = None, scale: float | None = None) -> None:
    """Grayscale PGM (binary P5) or PNG.

    PGM layout: ASCII "P5\\n<width> <height>\\n255\\n" followed by
    width*height bytes, rows top to bottom.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    data = to_bytes(raster, scale)
    if fmt == "pgm":
        header = f"P5\n{raster.width} {raster.height}\n255\n".encode("ascii")
        path.write_bytes(header + data.tobytes())
    elif fmt == "png":
        from PIL import Image
        Image.fromarray(data, mode="L").save(path, format="PNG")
    else:
        raise ValueError(f"unsupported image format {fmt!r}")


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 PGM (maxval <= 255) into a uint8 (height, width) array."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise ValueError("only 8-bit PGM is supported")
    pos += 1
    return np.frombuffer(raw[pos:pos + w * h], dtype=np.uint8).reshape(h, w).copy()


def render_cloud(points, resolution: int = 512, k: int = 20, weights=None, box: SceneBox | None = None) -> Raster:
    """2D density image of a point cloud with kNN bandwidths."""
    pts = np.asarray(points, dtype=np.float64)[:, :2]
    kk = min(k, pts.shape[0] - 1)
    bw = knn_bandwidths(pts, kk) if kk >= 1 else np.zeros(pts.shape[0])
    return splat(pts, bw, resolution, weights, box)
