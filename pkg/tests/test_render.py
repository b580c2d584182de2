import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keyflow.render import (Raster, SceneBox, knn_bandwidths, read_pgm, render_cloud, splat, to_bytes,
                            write_image)

BOX = SceneBox(0.0, 0.0, 64.0)   # one scene unit per pixel at resolution 64


def brute_knn(pts, k):
    D = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(-1))
    np.fill_diagonal(D, np.inf)
    return np.sort(D, axis=1)[:, k - 1]


def test_knn_grid():
    g = np.stack(np.meshgrid(np.arange(5.0), np.arange(5.0)), -1).reshape(-1, 2)
    bw = knn_bandwidths(g, 1)
    assert np.all(bw == 1.0)


def test_knn_duplicates():
    assert np.all(knn_bandwidths(np.ones((30, 2)), 20) == 0)


def test_knn_brute_force():
    pts = np.random.default_rng(0).uniform(-1, 1, (100, 2))
    assert np.array_equal(knn_bandwidths(pts, 20), brute_knn(pts, 20))


def test_knn_too_few():
    with pytest.raises(ValueError, match="21"):
        knn_bandwidths(np.zeros((20, 2)), 20)


def test_single_point_symmetric():
    r = splat([[32.0, 32.0]], [3.0], 64, box=BOX)
    v = r.values
    peak = np.unravel_index(v.argmax(), v.shape)
    assert peak in {(31, 31), (31, 32), (32, 31), (32, 32)}
    assert np.allclose(v, v[::-1, :], atol=1e-15) and np.allclose(v, v.T, atol=1e-15)
    assert np.allclose(v, v[:, ::-1], atol=1e-15)


def test_two_blobs_equal_mass():
    r = splat([[16.0, 32.0], [48.0, 32.0]], [2.5, 2.5], 64, box=BOX)
    left, right = r.values[:, :32].sum(), r.values[:, 32:].sum()
    assert abs(left - right) <= 0.01 * left


def test_mass_interior_cloud():
    pts = np.random.default_rng(1).uniform(-0.5, 0.5, (500, 2))
    r = render_cloud(pts, 128, 20, box=SceneBox(-1.0, -1.0, 2.0))
    assert abs(r.mass - 1.0) <= 0.02


def test_linearity():
    rng = np.random.default_rng(2)
    A, B = rng.uniform(5, 59, (40, 2)), rng.uniform(5, 59, (30, 2))
    bA, bB = rng.uniform(0.5, 4, 40), rng.uniform(0.5, 4, 30)
    wA, wB = rng.random(40), rng.random(30)
    whole = splat(np.vstack([A, B]), np.concatenate([bA, bB]), 64, np.concatenate([wA, wB]), BOX)
    parts = splat(A, bA, 64, wA, BOX).values + splat(B, bB, 64, wB, BOX).values
    assert np.abs(whole.values - parts).max() <= 1e-12


def test_translation_equivariance():
    rng = np.random.default_rng(3)
    # dyadic coordinates keep the shifted pixel positions exact
    pts = np.round(rng.uniform(20, 40, (25, 2)) * 8) / 8
    bw = np.round(rng.uniform(0.5, 2.0, 25) * 8) / 8
    a = splat(pts, bw, 64, box=BOX).values
    b = splat(pts + [5.0, -3.0], bw, 64, box=BOX).values
    # +x moves columns right, -y moves rows down (row 0 is the top)
    assert np.allclose(b[11:59, 13:58], a[8:56, 8:53], rtol=0, atol=1e-15)
    assert b.sum() == pytest.approx(a.sum(), rel=1e-12)


def test_zero_bandwidth_one_pixel():
    r = splat([[10.5, 20.5]], [0.0], 64, box=BOX)
    assert r.values.sum() == 1.0 and r.values[64 - 21, 10] == 1.0


def test_resolution_check():
    with pytest.raises(ValueError):
        splat([[0.0, 0.0]], [1.0], 8)


def test_zero_raster_black(tmp_path):
    r = Raster(20, 20, np.zeros((20, 20)))
    write_image(r, tmp_path / "z.pgm")
    assert np.all(read_pgm(tmp_path / "z.pgm") == 0)


def test_pgm_layout_and_determinism(tmp_path):
    r = splat([[32.0, 32.0]], [6.0], 64, box=BOX)
    write_image(r, tmp_path / "a.pgm")
    write_image(r, tmp_path / "b.pgm", "pgm")
    raw = (tmp_path / "a.pgm").read_bytes()
    assert raw.startswith(b"P5\n64 64\n255\n") and len(raw) == len(b"P5\n64 64\n255\n") + 64 * 64
    assert raw == (tmp_path / "b.pgm").read_bytes()
    back = read_pgm(tmp_path / "a.pgm").astype(float)
    assert np.abs(back - r.values / r.values.max() * 255).max() <= 1.0


def test_png_and_global_scale(tmp_path):
    from PIL import Image
    r = splat([[32.0, 32.0]], [6.0], 64, box=BOX)
    write_image(r, tmp_path / "a.png")
    img = np.asarray(Image.open(tmp_path / "a.png"))
    assert img.shape == (64, 64) and img.max() == 255
    half = to_bytes(r, scale=2 * r.values.max())
    assert half.max() == 128
    with pytest.raises(ValueError):
        write_image(r, tmp_path / "a.bmp")


def test_scene_box_around():
    box = SceneBox.around(np.array([[0.0, 0.0], [2.0, 1.0]]), margin=0.0)
    assert box.size == 2.0 and box.xmin == 0.0 and box.ymin == -0.5


@settings(max_examples=25, deadline=None)
@given(st.integers(22, 300), st.integers(1, 20), st.integers(0, 10**6))
def test_knn_matches_brute_force(n, k, seed):
    pts = np.random.default_rng(seed).uniform(-1, 1, (n, 2))
    assert np.allclose(knn_bandwidths(pts, k), brute_knn(pts, k), rtol=0, atol=1e-15)
