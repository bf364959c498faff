from __future__ import annotations

import json

import numpy as np
import pytest

from rio4d import cli
from rio4d.io import load_radar_csv, load_tum
from rio4d.pipeline import PipelineResult


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("sparse")
    assert cli.main(["simulate", "--preset", "sparse", "--seed", "1", "--out", str(d)]) == 0
    return d


def test_simulate_writes_dataset(dataset):
    names = {p.name for p in dataset.iterdir()}
    assert {"radar.csv", "imu.csv", "groundtruth.txt", "labels.csv", "simulation.json"} <= names
    meta = json.loads((dataset / "simulation.json").read_text())
    assert meta["preset"] == "sparse" and meta["frames"] == len(load_radar_csv(dataset / "radar.csv"))


def test_run_and_eval(dataset, tmp_path, capsys):
    out = tmp_path / "run"
    assert cli.main(["run", "--data", str(dataset), "--mode", "D-IMU", "--out", str(out)]) == 0
    traj = load_tum(out / "trajectory.txt")
    diag = json.loads((out / "diagnostics.json").read_text())
    assert len(traj) == len(diag["frames"]) and diag["mode"] == "D-IMU"
    assert "mode = D-IMU" in (out / "config.txt").read_text()
    capsys.readouterr()
    js = tmp_path / "ate.json"
    assert cli.main(["eval", str(out / "trajectory.txt"), str(dataset / "groundtruth.txt"), "--json", str(js)]) == 0
    assert "ATE RMSE" in capsys.readouterr().out
    m = json.loads(js.read_text())
    assert m["rmse"] < 1e-3 and len(m["errors"]) == len(traj)


def test_run_is_bit_identical(dataset, tmp_path):
    for k in (1, 2):
        assert cli.main(["run", "-d", str(dataset), "--seed", "3", "-o", str(tmp_path / str(k))]) == 0
    assert (tmp_path / "1" / "trajectory.txt").read_bytes() == (tmp_path / "2" / "trajectory.txt").read_bytes()


def test_config_file(dataset, tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("mode = WD-IMU\nwindow_size = 5\n")
    out = tmp_path / "o"
    assert cli.main(["run", "-d", str(dataset), "-c", str(cfg), "-o", str(out)]) == 0
    assert "window_size = 5" in (out / "config.txt").read_text()


def test_ablate(dataset, tmp_path, capsys):
    out = tmp_path / "abl"
    assert cli.main(["ablate", "-d", str(dataset), "--modes", "D-IMU", "WD-IMU", "-o", str(out)]) == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0].startswith("mode,ate_rmse") and [r.split(",")[0] for r in rows[1:]] == ["D-IMU", "WD-IMU"]
    assert (out / "trajectory_d_imu.txt").exists() and (out / "ablation.json").exists()


@pytest.mark.parametrize("argv", [[], ["fly"], ["run"], ["simulate", "--preset", "moon", "--out", "x"]])
def test_usage_errors_exit_1(argv, tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    with pytest.raises(SystemExit) as e:
        cli.main(argv)
    assert e.value.code == 1


def test_missing_streams_is_usage(tmp_path):
    assert cli.main(["run", "-o", str(tmp_path)]) == 1


def test_bad_config_exits_1(dataset, tmp_path, capsys):
    cfg = tmp_path / "c.txt"
    cfg.write_text("mode = Full\nbogus = 1\n")
    assert cli.main(["run", "-d", str(dataset), "-c", str(cfg), "-o", str(tmp_path / "o")]) == 1
    assert "line 2" in capsys.readouterr().err


def test_data_errors_exit_2(dataset, tmp_path, capsys):
    bad = tmp_path / "radar.csv"
    bad.write_text("timestamp,x,y,z,doppler,rcs\n1.0,1,2,3,0,loud\n")
    out = tmp_path / "o"
    assert cli.main(["run", "--radar", str(bad), "--imu", str(dataset / "imu.csv"), "-o", str(out)]) == 2
    assert "radar.csv:2:" in capsys.readouterr().err
    assert cli.main(["run", "-d", str(tmp_path / "nowhere"), "-o", str(out)]) == 2
    assert cli.main(["eval", str(tmp_path / "a.txt"), str(tmp_path / "b.txt")]) == 2


def test_empty_radar_stream_leaves_no_output(dataset, tmp_path):
    empty = tmp_path / "radar.csv"
    empty.write_text("timestamp,x,y,z,doppler,rcs\n")
    out = tmp_path / "o"
    assert cli.main(["run", "--radar", str(empty), "--imu", str(dataset / "imu.csv"), "-o", str(out)]) == 2
    assert not (out / "trajectory.txt").exists()


def test_eval_without_overlap_exits_2(dataset, tmp_path):
    t = tmp_path / "t.txt"
    t.write_text("1000 0 0 0 0 0 0 1\n")
    assert cli.main(["eval", str(t), str(dataset / "groundtruth.txt")]) == 2


def test_solver_failure_exits_3_and_still_writes(dataset, tmp_path, monkeypatch):
    real = cli.run_pipeline

    def failing(cfg, scans, imu):
        r = real(cfg, scans[:5], imu)
        r.diagnostics[-1].diverged = True
        return PipelineResult(r.states, r.diagnostics)

    monkeypatch.setattr(cli, "run_pipeline", failing)
    out = tmp_path / "o"
    assert cli.main(["run", "-d", str(dataset), "--mode", "D-IMU", "-o", str(out)]) == 3
    assert (out / "trajectory.txt").exists()
    assert json.loads((out / "diagnostics.json").read_text())["diverged_frames"] == 1


def test_numpy_values_serialize():
    assert cli._json_default(np.float64(1.5)) == 1.5
    assert cli._json_default(np.arange(2)) == [0, 1]
    with pytest.raises(TypeError):
        cli._json_default(object())
