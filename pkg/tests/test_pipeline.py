import json
import math

import numpy as np
import pytest
import torch

from keyflow.core import BARYCENTER, KEYFRAME, KeyframeSequence, PointCloud, write_points
from keyflow.ot import FAST, barycenter
from keyflow.pipeline import (BarycenterSettings, ConfigError, RenderSettings, RunConfig, export_frames, frame_times,
                              generate_frames, interval_frame, load_run_config, parse_run_config, read_frames,
                              run_config_dict, trace_trajectories)

from conftest import constant_net, rotation_net, square_keyframes, tiny_net

FAST_BARY = BarycenterSettings(steps=5)


def test_frame_count():
    times = frame_times([0.0, 1.0], 24)
    assert len(times) == 25 and times[0] == 0.0 and times[-1] == 1.0


def test_frame_times_merge_keyframes():
    times = frame_times([0.0, 0.51, 1.0], 4)
    assert times == [0.0, 0.25, 0.5, 0.51, 0.75, 1.0]
    # grid points within the snap tolerance collapse onto the keyframe time
    times = frame_times([0.0, 1.0 / 3.0, 1.0], 3)
    assert times.count(1.0 / 3.0) == 1 and len(times) == 4


def test_keyframe_adherence():
    kf = square_keyframes(n=50)
    frames = generate_frames(tiny_net(), kf, 4, FAST_BARY, samples=30)
    for fr in frames:
        if fr.time in kf.times:
            assert fr.kind == KEYFRAME
            assert fr.cloud.equals(kf.keyframes[kf.times.index(fr.time)].pool)
        else:
            assert fr.kind == BARYCENTER and fr.cloud.n == 30
    times = [f.time for f in frames]
    assert times == sorted(times) and times[0] == 0.0 and times[-1] == 1.0


def test_barycenter_objective_non_increasing():
    kf = square_keyframes(n=60)
    records = []
    generate_frames(tiny_net(seed=3), kf, 4, BarycenterSettings(steps=8), samples=40, records=records)
    corrected = [r for r in records if r["kind"] == BARYCENTER]
    assert len(corrected) == 3
    for r in corrected:
        assert r["objective_final"] <= r["objective_initial"]


def test_frames_independent_of_order():
    kf = square_keyframes(n=50)
    net = tiny_net(seed=4)
    full = generate_frames(net, kf, 4, FAST_BARY, samples=30, seed=7)
    alone = generate_frames(net, kf, 4, FAST_BARY, samples=30, seed=7, times=[0.75, 0.5])
    by_time = {f.time: f for f in full}
    for f in alone:
        assert f.cloud.equals(by_time[f.time].cloud)


def test_advected_only_mode():
    kf = square_keyframes(n=50)
    frames = generate_frames(constant_net([0.2, 0.0]), kf, 2, BarycenterSettings(enabled=False), samples=20)
    assert [f.kind for f in frames] == ["keyframe", "advected", "keyframe"]


def test_perfect_field_leaves_frame_unchanged():
    # one-point keyframes moved exactly by a constant field: both advected sets coincide
    a = PointCloud([[0.0, 0.0]], [1.0])
    b = PointCloud([[0.4, 0.2]], [1.0])
    kf = KeyframeSequence.from_raw([a, b], [0.0, 1.0], normalize=False)
    net = constant_net([0.4, 0.2])
    fr = interval_frame(net, kf, 0.25, 0, 10, BarycenterSettings(steps=50))
    assert np.allclose(fr.cloud.points, [[0.1, 0.05]], atol=1e-12)
    X = PointCloud.uniform(np.random.default_rng(0).uniform(-1, 1, (40, 2)))
    assert barycenter(X, X, 0.5, 0.5, 1e-4, init=X, opts=FAST).equals(X)


def test_trace_constant_and_zero():
    kf = square_keyframes(n=40)
    times, lines = trace_trajectories(constant_net([0.3, -0.4]), kf, 5, times=[0.0, 0.5, 1.0])
    seg = np.linalg.norm(lines[:, -1] - lines[:, 0], axis=1)
    assert lines.shape == (5, 3, 2) and np.allclose(seg, 0.5, atol=1e-12)
    _, lines = trace_trajectories(constant_net([0.0, 0.0]), kf, 3)
    assert np.all(lines == lines[:, :1])
    with pytest.raises(ValueError):
        trace_trajectories(constant_net([0.0, 0.0]), kf, 0)


def test_trace_rotation_arcs():
    a = PointCloud([[0.5, 0.0], [0.0, 0.7]], [0.5, 0.5])
    kf = KeyframeSequence.from_raw([a, a], [0.0, 1.0], normalize=False)
    times = list(np.linspace(0, 1, 201))
    _, lines = trace_trajectories(rotation_net(), kf, 4, times=times, steps_per_unit_time=200)
    for line in lines:
        r = np.linalg.norm(line[0])
        assert np.allclose(np.linalg.norm(line, axis=1), r, atol=1e-9)
        chord = np.linalg.norm(line[-1] - line[0])
        arc = np.linalg.norm(np.diff(line, axis=0), axis=1).sum()
        # 1 radian of arc: chord / arc = 2 sin(1/2)
        assert chord / arc == pytest.approx(2 * math.sin(0.5), abs=1e-3)


def test_export_roundtrip(tmp_path):
    kf = square_keyframes(n=30)
    records = []
    frames = generate_frames(tiny_net(), kf, 2, FAST_BARY, samples=10, records=records)
    out = export_frames(frames, kf, tmp_path / "frames", records)
    back = read_frames(out)
    assert len(back) == 3
    for (entry, pts), fr in zip(back, frames):
        assert entry["time"] == fr.time and entry["kind"] == fr.kind
        assert np.allclose(pts, kf.normalization.invert(fr.cloud.points), atol=1e-12)
    # keyframe frames come back in raw input units
    raw0 = kf.normalization.invert(kf.keyframes[0].pool.points)
    assert np.allclose(back[0][1], raw0, atol=1e-12)
    assert "objective_final" in back[1][0]
    with pytest.raises(FileNotFoundError):
        read_frames(tmp_path / "nothing")


def test_export_3d_ply(tmp_path):
    rng = np.random.default_rng(0)
    clouds = [PointCloud.uniform(rng.uniform(0, 1, (20, 3))) for _ in range(2)]
    kf = KeyframeSequence.from_raw(clouds, [0.0, 1.0])
    frames = generate_frames(tiny_net(d=3), kf, 1, FAST_BARY, samples=10)
    out = export_frames(frames, kf, tmp_path)
    assert (out / "frame_00000_0.000000.ply").exists() and (out / "frame_00001_1.000000.ply").exists()
    assert (out / "frame_00001_1.000000.pts").exists()


def _config_files(tmp_path):
    rng = np.random.default_rng(0)
    write_points(tmp_path / "a.txt", rng.uniform(0, 1, (20, 2)))
    write_points(tmp_path / "b.txt", rng.uniform(0, 1, (20, 2)) + 1)
    return {"keyframes": [{"path": "a.txt", "time": 0}, {"path": "b.txt", "time": 1}]}


def test_parse_run_config(tmp_path):
    doc = _config_files(tmp_path)
    doc.update({"train": {"iterations": 3, "tau": "inf", "lambdas": {"vel": 0.1}}, "fps": 12,
                "barycenter": {"tau": 0.05, "unbalanced_intervals": [0]}, "render": {"resolution": 64}})
    (tmp_path / "run.json").write_text(json.dumps(doc))
    cfg = load_run_config(tmp_path / "run.json")
    assert cfg.keyframes[0][0] == str(tmp_path / "a.txt")
    assert cfg.train.iterations == 3 and math.isinf(cfg.train.tau)
    assert cfg.barycenter.tau_for(0) == 0.05 and math.isinf(cfg.barycenter.tau_for(1))
    assert cfg.model == str(tmp_path / "out" / "model.kfn")
    kf = cfg.load_keyframes()
    assert kf.T == 2
    again = parse_run_config(json.loads(json.dumps(run_config_dict(cfg))), "/")
    assert again == cfg


def test_run_config_errors(tmp_path):
    doc = _config_files(tmp_path)
    with pytest.raises(ConfigError, match="unknown"):
        parse_run_config({**doc, "colour": 1}, tmp_path)
    with pytest.raises(ConfigError):
        parse_run_config({**doc, "fps": 0.5}, tmp_path)
    with pytest.raises(ConfigError):
        parse_run_config({**doc, "render": {"resolution": 8}}, tmp_path)
    with pytest.raises(ConfigError):
        parse_run_config({**doc, "train": {"epsilon": -1}}, tmp_path)
    with pytest.raises(ConfigError):
        parse_run_config({"keyframes": [{"path": "a.txt"}]}, tmp_path)
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "bad.json")


def test_render_settings_defaults():
    r = RenderSettings()
    assert r.samples_for(2) == 4000 and r.samples_for(3) == 25000
    assert RenderSettings(samples_per_frame=7).samples_for(3) == 7
