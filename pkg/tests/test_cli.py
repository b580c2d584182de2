import json

import numpy as np
import pytest

from keyflow.cli import main
from keyflow.core import write_points
from keyflow.pipeline import read_frames
from keyflow.render import read_pgm


def _setup(tmp_path, n=300, extra=None):
    rng = np.random.default_rng(0)
    sq = rng.uniform(0, 1, (n, 2))
    write_points(tmp_path / "a.txt", sq)
    write_points(tmp_path / "b.txt", sq + [0.5, 0.0])
    doc = {"keyframes": [{"path": "a.txt", "time": 0}, {"path": "b.txt", "time": 1}], "out": "out"}
    doc.update(extra or {})
    (tmp_path / "run.json").write_text(json.dumps(doc))
    return tmp_path / "run.json"


def _rows(text):
    return dict(line.split("\t", 1) for line in text.strip().splitlines())


def test_check(tmp_path, capsys):
    assert main(["check", str(_setup(tmp_path))]) == 0
    rows = _rows(capsys.readouterr().out)
    assert rows["T"] == "2" and rows["d"] == "2" and rows["N0"] == "300"
    assert rows["pool_sizes"] == "300,300" and rows["times"] == "0,1"


def test_missing_model(tmp_path, capsys):
    cfg = _setup(tmp_path)
    assert main(["frames", str(tmp_path / "nope.kfn"), str(cfg)]) == 3
    assert "nope.kfn" in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert main(["explode"]) == 2
    assert main([]) == 2
    assert main(["check", str(tmp_path / "missing.json")]) == 3


def test_bad_keyframes(tmp_path, capsys):
    cfg = _setup(tmp_path)
    (tmp_path / "b.txt").write_text("1 2 3\n")
    assert main(["check", str(cfg)]) == 3


def test_end_to_end(tmp_path, capsys):
    tiny = {"iterations": 4, "rff_count": 4, "hidden": [8], "n_initial": 20, "ode_steps_per_unit_time": 2,
            "mc_points": 4, "mc_times": 2}
    cfg = _setup(tmp_path, n=60, extra={"train": tiny, "fps": 4, "barycenter": {"steps": 3},
                                        "render": {"samples_per_frame": 40}})
    out = tmp_path / "out"
    assert main(["train", str(cfg), "--quiet"]) == 0
    assert (out / "model.kfn").exists() and (out / "loss_curves.png").exists()
    lines = (out / "telemetry.jsonl").read_text().splitlines()
    assert len(lines) == 4 and all("wall_ms" not in json.loads(l) for l in lines)

    assert main(["frames", str(out / "model.kfn"), str(cfg)]) == 0
    frames = read_frames(out / "frames")
    assert [e["kind"] for e, _ in frames] == ["keyframe", "barycenter", "barycenter", "barycenter", "keyframe"]

    capsys.readouterr()
    assert main(["render", str(out / "frames"), "--res", "32", "--format", "pgm", "--k", "5"]) == 0
    rows = capsys.readouterr().out.strip().splitlines()
    assert rows[0].split("\t") == ["index", "time", "mass", "file"] and len(rows) == 6
    img = read_pgm(out / "render" / "frame_00000.pgm")
    assert img.shape == (32, 32) and img.max() == 255

    assert main(["trace", str(out / "model.kfn"), str(cfg), "--n", "5"]) == 0
    assert (out / "trajectories.png").exists()
    tsv = (out / "trajectories.tsv").read_text().splitlines()
    assert tsv[0] == "path\ttime\tx\ty" and len(tsv) > 5
