import numpy as np
import pytest

from ekfvio.config import (
    ConfigError, DatasetConfig, PRESETS, config_from_dict, config_to_toml, load_config, preset,
)
from ekfvio.dataset import (
    DatasetError, FrameObservations, load_euroc, read_tracks, write_tracks,
)
from ekfvio.evaluation import EvaluationError, evaluate_ate
from ekfvio.filter import NoiseParams
from ekfvio.geometry import RigidTransform, rotation_to_quat, so3_exp
from ekfvio.msckf import triangulate
from ekfvio.pipeline import run_pipeline
from ekfvio.synthetic import SyntheticScene, body_motion, generate_synthetic
from ekfvio.trajectory import Trajectory, read_trajectory, write_trajectory

G = 9.81


# --- trajectories -----------------------------------------------------------------

def _random_traj(rng, n=200, with_extras=True):
    t = np.cumsum(rng.uniform(0.01, 0.05, n))
    poses = [RigidTransform(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 3) for _ in t]
    vel = rng.normal(size=(n, 3)) if with_extras else None
    cov = None
    if with_extras:
        A = rng.normal(size=(n, 3, 3))
        cov = A @ A.transpose(0, 2, 1)
    return Trajectory.from_poses(t, poses, vel, cov)


@pytest.mark.parametrize("extras", [False, True])
def test_trajectory_round_trip(tmp_path, rng, extras):
    tr = _random_traj(rng, with_extras=extras)
    write_trajectory(tmp_path / "t.txt", tr)
    back = read_trajectory(tmp_path / "t.txt")
    assert np.allclose(back.times, tr.times, atol=1e-9)
    assert np.allclose(back.positions, tr.positions, rtol=1e-8, atol=1e-8)
    assert np.allclose(np.abs(np.sum(back.quaternions * tr.quaternions, axis=1)), 1, atol=1e-8)
    if extras:
        assert np.allclose(back.position_covariances, tr.position_covariances, rtol=1e-8)


def test_trajectory_rejects_unordered_times():
    with pytest.raises(ValueError):
        Trajectory([0.0, 0.0], np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)))


def test_trajectory_reader_reports_line(tmp_path):
    (tmp_path / "bad.txt").write_text("# header\n0 0 0 0 1 0 0 0\n1 2 3\n")
    with pytest.raises(ValueError, match=":3:"):
        read_trajectory(tmp_path / "bad.txt")


# --- ATE ----------------------------------------------------------------------------

def test_ate_identity_and_rigid_invariance(rng):
    gt = _random_traj(rng, with_extras=False)
    assert evaluate_ate(gt, gt).rmse_m < 1e-12
    T = RigidTransform(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 10)
    moved = Trajectory.from_poses(gt.times, [T @ gt.pose(k) for k in range(len(gt))])
    assert evaluate_ate(moved, gt).rmse_m < 1e-9
    noisy = Trajectory(gt.times, gt.positions + rng.normal(size=gt.positions.shape) * 0.05,
                       gt.quaternions)
    moved_noisy = Trajectory.from_poses(gt.times, [T @ noisy.pose(k) for k in range(len(gt))])
    assert abs(evaluate_ate(moved_noisy, gt).rmse_m - evaluate_ate(noisy, gt).rmse_m) < 1e-9


def test_ate_noise_oracle():
    # isotropic 3-D noise: per-point residual norm has RMS sigma * sqrt(3)
    rng = np.random.default_rng(11)
    n = 20000
    t = np.arange(n) * 0.01
    pos = np.column_stack([np.cos(t), np.sin(2 * t), 0.1 * t])
    q = np.tile([1.0, 0, 0, 0], (n, 1))
    gt = Trajectory(t, pos, q)
    est = Trajectory(t, pos + 0.1 / np.sqrt(3) * rng.normal(size=pos.shape), q)
    assert abs(evaluate_ate(est, gt).rmse_m - 0.1) < 0.01


def test_ate_needs_three_matches():
    gt = Trajectory([0.0, 1.0, 2.0], np.zeros((3, 3)), np.tile([1.0, 0, 0, 0], (3, 1)))
    est = Trajectory([0.0, 1.5], np.zeros((2, 3)), np.tile([1.0, 0, 0, 0], (2, 1)))
    with pytest.raises(EvaluationError):
        evaluate_ate(est, gt)


# --- ASL layout ---------------------------------------------------------------------

def _asl_fixture(root, stereo=True, n_imu=8, n_cam=2):
    mav = root / "mav0"
    (mav / "imu0").mkdir(parents=True)
    (mav / "cam0" / "data").mkdir(parents=True)
    t0 = 1403636579758555392
    rows = ["#timestamp [ns],w_RS_S_x [rad s^-1],w_RS_S_y,w_RS_S_z,a_RS_S_x [m s^-2],a_RS_S_y,a_RS_S_z"]
    for k in range(n_imu):
        rows.append(f"{t0 + 5_000_000 * k},0.1,0.2,0.3,{G},0.5,0.6")
    (mav / "imu0" / "data.csv").write_text("\n".join(rows) + "\n")
    cams = ["#timestamp [ns],filename"] + [f"{t0 + 12_000_000 + 20_000_000 * k},{k}.png"
                                             for k in range(n_cam)]
    (mav / "cam0" / "data.csv").write_text("\n".join(cams) + "\n")
    if stereo:
        (mav / "cam1" / "data").mkdir(parents=True)
        (mav / "cam1" / "data.csv").write_text("\n".join(cams) + "\n")
    return root


def test_asl_fixture_events_in_order(tmp_path):
    seq = load_euroc(_asl_fixture(tmp_path), stereo=True)
    events = list(seq.events())
    assert len(events) == 10
    stamps = [(e.timestamp if k == "imu" else seq.frame_times[e]) for k, e in events]
    assert all(a <= b for a, b in zip(stamps, stamps[1:]))
    # ASL column order: gyro first, then accelerometer
    s = seq.imu[0]
    assert np.allclose(s.gyro, [0.1, 0.2, 0.3]) and np.allclose(s.accel, [G, 0.5, 0.6])
    assert s.timestamp == pytest.approx(1403636579.758555392, abs=1e-6)


def test_missing_cam1_is_configuration_error(tmp_path):
    root = _asl_fixture(tmp_path, stereo=False)
    with pytest.raises(DatasetError, match="cam1"):
        load_euroc(root, stereo=True)
    assert load_euroc(root, stereo=False).n_frames == 2


def test_unparsable_row_reports_file_and_line(tmp_path):
    root = _asl_fixture(tmp_path)
    p = root / "mav0" / "imu0" / "data.csv"
    p.write_text(p.read_text() + "123,abc,1,1,1,1,1\n")
    with pytest.raises(DatasetError, match=r"data.csv:10"):
        load_euroc(root)


def test_tracks_file_round_trip(tmp_path):
    frames = [FrameObservations(0, [1, 2], [[1.0, 2.0], [3.0, 4.0]], [[0.5, 2.0], [2.5, 4.0]]),
              FrameObservations(1, [2], [[3.5, 4.0]], [[3.0, 4.0]]),
              FrameObservations(2, [], np.zeros((0, 2)), np.zeros((0, 2)))]
    write_tracks(tmp_path / "tracks.txt", frames)
    back = read_tracks(tmp_path / "tracks.txt", 3)
    assert [list(f.ids) for f in back] == [[1, 2], [2], []]
    assert np.allclose(back[0].right, frames[0].right)


# --- configuration ------------------------------------------------------------------

def test_presets_match_parameter_table():
    table = {"fast-vio": (6, 5, 2, 70, 13), "normal-vio": (20, 20, 17, 200, 31)}
    for name, (n_a, n_target, n_fifo, feats, win) in table.items():
        p = PRESETS[name]
        assert (p.n_a, p.n_target, p.n_fifo, p.max_features_stereo, p.lk_window) == \
            (n_a, n_target, n_fifo, feats, win)
    assert (PRESETS["normal-slam"].n_ba, PRESETS["normal-slam"].n_matching) == (20, 20)
    assert (PRESETS["postprocess-slam"].n_ba, PRESETS["postprocess-slam"].n_matching) == (100, 50)
    with pytest.raises(ConfigError):
        preset("turbo-vio")


def test_config_toml_round_trip(tmp_path):
    data = generate_synthetic(SyntheticScene(duration=4.0, n_landmarks=50))
    cfg = DatasetConfig(data.sequence.rig, NoiseParams(acc_noise=3e-3), preset("fast-vio", n_a=7),
                        "fast-vio")
    (tmp_path / "c.toml").write_text(config_to_toml(cfg))
    back = load_config(tmp_path / "c.toml")
    assert back.params == cfg.params and back.noise == cfg.noise
    assert np.allclose(back.rig.imu_from_camera[1].as_matrix(), cfg.rig.imu_from_camera[1].as_matrix())
    with pytest.raises(ConfigError):
        config_from_dict({"preset": {"name": "fast-vio"}})


def test_example_euroc_config_loads():
    cfg = load_config("configs/euroc_stereo.toml")
    assert cfg.stereo and cfg.rig.cameras[0].width == 752
    assert cfg.with_mode("mono").stereo is False


# --- synthetic generator --------------------------------------------------------------

def test_static_scene_imu_and_tracks():
    data = generate_synthetic(SyntheticScene(trajectory="static", duration=3.0, n_landmarks=60))
    gyro = np.array([s.gyro for s in data.sequence.imu])
    acc = np.array([s.accel for s in data.sequence.imu])
    assert np.abs(gyro).max() < 1e-15
    assert np.allclose(acc, [0, 0, G], atol=1e-12)
    first = {j: p for j, p in zip(data.sequence.tracks[0].ids, data.sequence.tracks[0].left)}
    for fr in data.sequence.tracks[1:]:
        for j, p in zip(fr.ids, fr.left):
            assert np.allclose(p, first[j], atol=1e-9)


def test_circle_centripetal_acceleration():
    scene = SyntheticScene(trajectory="circle", size=2.0, period=10.0, duration=20.0,
                           roll_amplitude=0.0, pitch_amplitude=0.0, height_amplitude=0.0)
    t = np.linspace(8.0, 18.0, 50)                  # cruise segment
    m = body_motion(scene, t)
    w = 2 * np.pi / scene.period
    acc_world = np.einsum("nij,nj->ni", m.rotations, m.specific_force) - [0, 0, G]
    assert np.allclose(np.linalg.norm(acc_world, axis=1), scene.size * w ** 2, rtol=1e-9)
    # pointing at the center
    assert np.allclose(acc_world[:, :2] / np.linalg.norm(acc_world[:, :2], axis=1)[:, None],
                       -m.positions[:, :2] / scene.size, atol=1e-9)


def test_imu_matches_numerical_derivatives():
    scene = SyntheticScene(duration=12.0)
    dt = 1e-4
    t = np.linspace(4.0, 10.0, 25)
    m = body_motion(scene, t)
    mp, mm = body_motion(scene, t + dt), body_motion(scene, t - dt)
    acc = (mp.positions - 2 * m.positions + mm.positions) / dt ** 2
    f_num = np.einsum("nji,nj->ni", m.rotations, acc + [0, 0, G])
    assert np.abs(f_num - m.specific_force).max() < 1e-4
    dR = np.einsum("nji,njk->nik", m.rotations, mp.rotations - mm.rotations) / (2 * dt)
    w_num = np.column_stack([dR[:, 2, 1], dR[:, 0, 2], dR[:, 1, 0]])
    assert np.abs(w_num - m.gyro).max() < 1e-6


def test_noise_free_tracks_triangulate_to_landmarks():
    data = generate_synthetic(SyntheticScene(duration=6.0, n_landmarks=80))
    seq, rig = data.sequence, data.sequence.rig
    frames = [0, 30, 60, 90]
    poses = [data.truth_frames.pose(k) for k in frames]
    per_track = {}
    for s, k in enumerate(frames):
        fr = seq.tracks[k]
        for j, l, r in zip(fr.ids, fr.left, fr.right):
            per_track.setdefault(j, []).append((s, l, r))
    pose_vec = np.array([np.concatenate([T.translation, rotation_to_quat(T.rotation.T)])
                         for T in poses])
    checked = 0
    for j, obs in per_track.items():
        if len(obs) < 2:
            continue
        slots, cams, ys = [], [], []
        for s, l, r in obs:
            for c, px in ((0, l), (1, r)):
                xn, ok = rig.cameras[c].normalized_coords(px)
                slots.append(s)
                cams.append(c)
                ys.append(xn[0])
        tri = triangulate(pose_vec, slots, cams, np.array(ys), rig, want_jacobian=False)
        if not tri.valid:
            continue
        assert np.linalg.norm(tri.point - data.landmarks[data.track_landmark[j]]) < 1e-6
        checked += 1
    assert checked > 20


def test_generator_is_seeded():
    a = generate_synthetic(SyntheticScene(duration=4.0, imu_noise=True, pixel_noise=0.5, seed=4))
    b = generate_synthetic(SyntheticScene(duration=4.0, imu_noise=True, pixel_noise=0.5, seed=4))
    assert np.array_equal(a.sequence.imu[10].accel, b.sequence.imu[10].accel)
    assert np.array_equal(a.sequence.tracks[20].left, b.sequence.tracks[20].left)
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticScene(duration=3.0), rate_cam=0.0)


# --- pipeline -----------------------------------------------------------------------

def _short_run(preset_name="normal-vio", **scene_kw):
    kw = dict(duration=8.0, n_landmarks=150)
    kw.update(scene_kw)
    data = generate_synthetic(SyntheticScene(**kw))
    cfg = DatasetConfig(data.sequence.rig, NoiseParams(), preset(preset_name), preset_name)
    return data, run_pipeline(data.sequence, cfg)


def test_pipeline_row_count_and_determinism():
    data, a = _short_run()
    _, b = _short_run()
    assert len(a.online) == len(a.metrics.frame_ms) == data.sequence.n_frames
    assert np.array_equal(a.online.positions, b.online.positions)
    assert np.array_equal(a.online.quaternions, b.online.quaternions)


def test_pipeline_tracks_short_noise_free_run():
    data, res = _short_run()
    ate = evaluate_ate(res.online, data.truth_frames)
    assert ate.rmse_m < 1e-3 * data.truth_frames.path_length()
    assert sum(res.metrics.accepted) > 100


def test_no_reuse_of_observations():
    data, res = _short_run("fast-vio")
    used = res.metrics.used_observations
    assert len(used) == len(set(used))
    assert max(res.metrics.accepted) <= PRESETS["fast-vio"].n_target


def test_stationary_trail_does_not_fill_with_duplicates():
    data, res = _short_run(trajectory="static", duration=10.0, pixel_noise=0.05)
    m = res.metrics
    assert sum(m.stationary) > 0.8 * len(m.stationary)
    assert max(m.stationary_in_trail) <= 1
