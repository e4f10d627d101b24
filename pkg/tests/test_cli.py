import subprocess
import sys

import numpy as np
import pytest

from ekfvio.cli import main
from ekfvio.trajectory import Trajectory, read_trajectory, write_trajectory

SCENE = """
[scene]
trajectory = "figure8"
duration = 5.0
n_landmarks = 120
seed = 2

[preset]
name = "normal-vio"
"""


@pytest.fixture(scope="module")
def asl_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scene.toml").write_text(SCENE)
    assert main(["synth", str(root / "scene.toml"), "--out", str(root / "seq")]) == 0
    return root


def test_synth_writes_asl_layout(asl_dir):
    mav = asl_dir / "seq" / "mav0"
    for sub in ("imu0", "cam0", "cam1", "state_groundtruth_estimate0"):
        assert (mav / sub / "data.csv").exists()
    assert (asl_dir / "seq" / "tracks.txt").exists()
    assert (asl_dir / "seq" / "calibration.toml").exists()
    n_frames = sum(1 for _ in open(mav / "cam0" / "data.csv")) - 1
    assert n_frames == 101             # both endpoints of the 5 s span


def test_run_then_eval(asl_dir, capsys):
    out = asl_dir / "est.txt"
    assert main(["run", str(asl_dir / "seq"), "--output", str(out)]) == 0
    est = read_trajectory(out)
    assert len(est) == 101                     # one row per frame
    assert np.all(np.diff(est.times) > 0)
    capsys.readouterr()
    gt = asl_dir / "seq" / "mav0" / "state_groundtruth_estimate0" / "data.csv"
    assert main(["eval", str(out), str(gt)]) == 0
    line = capsys.readouterr().out.strip()
    assert line.startswith("rmse_m=")
    assert float(line.split("=")[1]) < 0.05


def test_run_scene_file_directly(asl_dir, capsys):
    out = asl_dir / "scene_est.txt"
    assert main(["run", str(asl_dir / "scene.toml"), "--output", str(out), "--set", "n_target=10"]) == 0
    assert '"rmse_m"' in capsys.readouterr().out
    assert len(read_trajectory(out)) == 101


def test_plot_writes_svg_and_csv(tmp_path):
    t = np.linspace(0, 2 * np.pi, 50)
    pos = np.column_stack([np.cos(t), np.sin(t), 0 * t])
    q = np.tile([1.0, 0, 0, 0], (50, 1))
    write_trajectory(tmp_path / "a.txt", Trajectory(t, pos, q))
    write_trajectory(tmp_path / "b.txt", Trajectory(t, pos + 0.01, q))
    assert main(["plot", str(tmp_path / "a.txt"), str(tmp_path / "b.txt"),
                 "--out", str(tmp_path / "p.svg")]) == 0
    assert (tmp_path / "p.svg").read_text().lstrip().startswith(("<?xml", "<svg"))
    rows = (tmp_path / "p.csv").read_text().splitlines()
    assert len(rows) == 51


def test_missing_input_exits_1(tmp_path, capsys):
    assert main(["eval", str(tmp_path / "nope.txt"), str(tmp_path / "gt.txt")]) == 1
    assert "error" in capsys.readouterr().err


def test_directory_without_config_exits_1(tmp_path):
    assert main(["run", str(tmp_path), "--output", str(tmp_path / "o.txt")]) == 1


def test_unknown_flag_exits_2():
    proc = subprocess.run([sys.executable, "-m", "ekfvio", "run", "--bogus"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
