import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ekfvio.filter import (
    ACC_BIAS, BASE_DIM, GYRO_BIAS, POSE_DIM, POS, QUAT, VEL, FilterState, ImuGapError,
    ImuSample, InitializationError, NoiseParams, UpdateOutcome, augment_pose,
    augmentation_indices, augmentation_matrix, choose_discard_index, gated_update,
    hanoi_discard_index, initialize, is_stationary, least_significant_zero_bit,
    ou_increment_variance, predict, process_noise, propagate_mean, propagation_jacobians,
    slot_slice, unaugment_pose,
)
from ekfvio.geometry import quat_to_rotation, yaw_of

from conftest import central_diff, random_quat, rel_err

G = 9.81


def _random_state(rng, n_a=3):
    x = np.zeros(BASE_DIM + POSE_DIM * n_a)
    x[POS] = rng.normal(size=3)
    x[QUAT] = random_quat(rng)
    x[VEL] = rng.normal(size=3)
    x[ACC_BIAS] = rng.normal(size=3) * 0.1
    x[GYRO_BIAS] = rng.normal(size=3) * 0.01
    x[16:19] = 1.0 + rng.normal(size=3) * 0.01
    for s in range(1, n_a + 1):
        x[slot_slice(s)] = np.concatenate([rng.normal(size=3), random_quat(rng)])
    A = rng.normal(size=(len(x), len(x)))
    return FilterState(x, A @ A.T * 1e-3 + 1e-4 * np.eye(len(x)), 0.0, 0, list(range(n_a)))


# --- initialization -------------------------------------------------------------

def test_initialize_level():
    st_ = initialize([[0, 0, G]], NoiseParams(), 4)
    assert np.allclose(st_.orientation, [1, 0, 0, 0])
    assert np.all(st_.mean[16:19] == 1.0)
    assert np.count_nonzero(st_.mean) == 1 + 3      # q_w and the three scales
    assert st_.dim == BASE_DIM + 4 * POSE_DIM


def test_initialize_pitched():
    st_ = initialize([[G, 0, 0]], NoiseParams(), 2)
    R = quat_to_rotation(st_.orientation)        # world-to-IMU
    assert np.allclose(R.T @ [G, 0, 0], [0, 0, G], atol=1e-9)


def test_initialize_rejects_free_fall():
    with pytest.raises(InitializationError):
        initialize([[0, 0, 0.1]], NoiseParams(), 2)


# --- prediction -------------------------------------------------------------------

def test_static_equilibrium():
    p = NoiseParams()
    st_ = initialize([[0, 0, G]], p, 2)
    for k in range(1, 201):
        st_ = predict(st_, ImuSample(k * 0.005, np.zeros(3), np.array([0, 0, G])), p)
    assert np.allclose(st_.position, 0, atol=1e-12) and np.allclose(st_.velocity, 0, atol=1e-12)
    assert np.allclose(st_.orientation, [1, 0, 0, 0])


def test_constant_yaw_rate_matches_closed_form():
    p = NoiseParams()
    st_ = initialize([[0, 0, G]], p, 1)
    w, dt, n = 0.7, 0.005, 400
    for k in range(1, n + 1):
        st_ = predict(st_, ImuSample(k * dt, np.array([0, 0, w]), np.array([0, 0, G])), p)
    heading = yaw_of(quat_to_rotation(st_.orientation).T)
    assert abs(np.angle(np.exp(1j * (heading - n * w * dt)))) < 1e-9


def test_random_walk_bias_limit():
    p = NoiseParams(acc_bias_alpha=0.0, gyro_bias_alpha=0.0)
    st_ = initialize([[0, 0, G]], p, 1)
    dt = 0.01
    before = np.diag(st_.cov)[ACC_BIAS].copy()
    st_ = predict(st_, ImuSample(dt, np.zeros(3), np.array([0, 0, G])), p)
    assert np.allclose(np.diag(st_.cov)[ACC_BIAS] - before, p.acc_bias_sigma ** 2 * dt, rtol=1e-12)
    assert ou_increment_variance(2.0, 0.0, 0.5) == pytest.approx(2.0)


def test_gap_rejected():
    p = NoiseParams()
    st_ = initialize([[0, 0, G]], p, 1)
    with pytest.raises(ImuGapError):
        predict(st_, ImuSample(0.5, np.zeros(3), np.array([0, 0, G])), p)
    with pytest.raises(ImuGapError):
        predict(st_, ImuSample(0.0, np.zeros(3), np.array([0, 0, G])), p)


def test_propagation_jacobians_finite_differences():
    rng = np.random.default_rng(0)
    p = NoiseParams(acc_bias_alpha=0.3, gyro_bias_alpha=0.2)
    for _ in range(100):
        x0 = _random_state(rng, 0).mean
        gyro = rng.normal(size=3)
        accel = rng.normal(size=3) + [0, 0, G]
        dt = rng.uniform(0.001, 0.02)
        F, Gm = propagation_jacobians(x0, gyro, accel, dt, p)
        Fn = central_diff(lambda x: propagate_mean(x, gyro, accel, dt, p), x0)
        Gn = central_diff(lambda n: propagate_mean(x0, gyro, accel, dt, p, n), np.zeros(12))
        assert rel_err(F, Fn) < 1e-4
        assert rel_err(Gm, Gn) < 1e-4


def test_prediction_leaves_trail_and_keeps_psd():
    rng = np.random.default_rng(1)
    p = NoiseParams()
    st_ = _random_state(rng, 3)
    trail = st_.mean[BASE_DIM:].copy()
    trail_cov = st_.cov[BASE_DIM:, BASE_DIM:].copy()
    for k in range(1, 50):
        st_ = predict(st_, ImuSample(k * 0.005, rng.normal(size=3), rng.normal(size=3)), p)
    assert np.array_equal(st_.mean[BASE_DIM:], trail)
    assert np.array_equal(st_.cov[BASE_DIM:, BASE_DIM:], trail_cov)
    assert np.allclose(st_.cov, st_.cov.T)
    assert np.linalg.eigvalsh(st_.cov).min() >= -1e-9 * np.trace(st_.cov)


def test_ou_bias_stationary_variance():
    # simulate many independent OU chains with the filter's increment formula
    rng = np.random.default_rng(2)
    sigma, alpha, dt = 2e-3, 0.5, 0.01
    decay = np.exp(-alpha * dt)
    sd = np.sqrt(ou_increment_variance(sigma, alpha, dt))
    b = np.zeros(20000)
    for _ in range(2000):          # 20 s = 10 time constants
        b = decay * b + sd * rng.standard_normal(b.shape)
    assert abs(b.var() / (sigma ** 2 / (2 * alpha)) - 1) < 0.1


def test_process_noise_shape():
    Q = process_noise(0.005, NoiseParams())
    assert Q.shape == (12, 12) and np.all(np.diag(Q) > 0)


# --- pose trail -------------------------------------------------------------------

@pytest.mark.parametrize("i, expected", [(2, 20), (3, 18), (0, 20), (7, 17), (1, 19)])
def test_discard_index_examples(i, expected):
    assert choose_discard_index(i, 17, 20, [1] * 20) == expected


def test_zero_covisibility_override():
    cov = [3] * 20
    cov[4] = 0
    for i in range(16):
        assert choose_discard_index(i, 17, 20, cov) == 5
    with pytest.raises(ValueError):
        choose_discard_index(0, 21, 20)


def test_least_significant_zero_bit():
    assert [least_significant_zero_bit(i) for i in range(8)] == [0, 1, 0, 2, 0, 1, 0, 3]


def _lsb_zero_oracle(i):
    # enumerate the binary string, independent of the bit tricks in the filter
    bits = bin(i)[2:][::-1] + "0"
    return bits.index("0")


def _simulate_trail(n_fifo, n_a, frames):
    slots = [None] * n_a
    strides, max_age = set(), 0
    for i in range(frames):
        d = hanoi_discard_index(i, n_fifo, n_a)
        assert d == max(n_fifo, n_a - _lsb_zero_oracle(i))
        del slots[d - 1]
        slots.insert(0, i)
        if None not in slots:
            strides |= set((-np.diff(slots)).tolist())
            max_age = max(max_age, i - slots[-1])
    return strides, max_age


def test_fast_preset_trail_outlives_fifo():
    strides, max_age = _simulate_trail(2, 6, 1024)
    assert max_age > 5 and max(strides) > 1


def test_fast_preset_schedule_has_exponential_strides():
    # claimed property: stored poses are 1, 2, 4, ... frames apart
    strides, _ = _simulate_trail(2, 6, 1024)
    assert {1, 2, 4} <= strides, f"strides seen: {sorted(strides)}"


def test_augmentation_matrix_matches_index_map():
    rng = np.random.default_rng(4)
    for n_a in (1, 3, 6):
        dim = BASE_DIM + POSE_DIM * n_a
        x = rng.normal(size=dim)
        A_ = rng.normal(size=(dim, dim))
        P = A_ @ A_.T
        for d in range(1, n_a + 1):
            A = augmentation_matrix(dim, n_a, d)
            idx = augmentation_indices(dim, n_a, d)
            assert np.array_equal(A @ x, x[idx])
            assert np.abs(A @ P @ A.T - P[np.ix_(idx, idx)]).max() < 1e-12


def test_augment_copies_current_pose():
    rng = np.random.default_rng(5)
    st_ = _random_state(rng, 4)
    st_.frame_index = 99
    for d in (1, 2, 4):
        new = augment_pose(st_, d)
        s = slot_slice(1)
        assert np.array_equal(new.mean[s], st_.mean[:POSE_DIM])
        assert np.array_equal(new.cov[s, s], st_.cov[:POSE_DIM, :POSE_DIM])
        assert np.array_equal(new.cov[s, :BASE_DIM], st_.cov[:POSE_DIM, :BASE_DIM])
        assert new.slot_frames[0] == 99 and len(new.slot_frames) == 4
        assert st_.slot_frames[d - 1] not in new.slot_frames
    fifo = augment_pose(st_, 4)
    assert fifo.slot_frames == [99, 0, 1, 2]


def test_unaugment_restores_base_block():
    rng = np.random.default_rng(6)
    st_ = _random_state(rng, 4)
    st_.frame_index = 50
    out = unaugment_pose(augment_pose(st_, 4), 1e6)
    assert np.array_equal(out.mean[:BASE_DIM], st_.mean[:BASE_DIM])
    assert out.slot_frames[-1] is None
    last = slot_slice(4)
    assert np.all(np.diag(out.cov)[last] >= 1e12)
    assert np.array_equal(out.mean[last], np.zeros(POSE_DIM))


def test_large_unaugment_sigma_isolates_last_slot():
    # 2-pose toy: an update through the inflated slot barely moves the others
    rng = np.random.default_rng(7)
    st_ = unaugment_pose(_random_state(rng, 2), 1e6)
    Hc = np.zeros((2, st_.dim))
    Hc[:, slot_slice(2).start:slot_slice(2).start + 2] = np.eye(2)
    new, out = gated_update(st_, np.array([0.3, -0.2]), Hc, 1e-4 * np.eye(2), None)
    assert out is UpdateOutcome.ACCEPTED
    assert np.abs(new.mean[:slot_slice(2).start] - st_.mean[:slot_slice(2).start]).max() < 1e-6


# --- gated update -----------------------------------------------------------------

def _toy_state(n=4, var=1.0):
    return FilterState(np.zeros(n), var * np.eye(n), 0.0)


def test_zero_residual_always_accepted():
    rng = np.random.default_rng(8)
    st_ = _random_state(rng, 2)
    H = rng.normal(size=(4, st_.dim))
    new, out = gated_update(st_, np.zeros(4), H, 1e-2 * np.eye(4))
    assert out is UpdateOutcome.ACCEPTED
    assert np.trace(new.cov) < np.trace(st_.cov)
    assert np.allclose(new.mean[:3], st_.mean[:3])


def test_scalar_gate_threshold():
    # r^2 / (H P H^T + R) against 3.841
    st_ = FilterState(np.zeros(BASE_DIM), np.eye(BASE_DIM), 0.0)
    st_.mean[QUAT] = [1, 0, 0, 0]
    H = np.zeros((1, BASE_DIM))
    H[0, 0] = 1.0
    S = 1.0 + 1.0
    ok_r = np.sqrt(3.84 * S)
    bad_r = np.sqrt(3.85 * S)
    assert gated_update(st_, [ok_r], H, [[1.0]])[1] is UpdateOutcome.ACCEPTED
    assert gated_update(st_, [bad_r], H, [[1.0]])[1] is UpdateOutcome.GATED


def test_huge_residual_rejected_bit_identical():
    rng = np.random.default_rng(9)
    st_ = _random_state(rng, 1)
    H = rng.normal(size=(2, st_.dim))
    S = H @ st_.cov @ H.T + np.eye(2)
    r = 100 * np.sqrt(np.diag(S))
    new, out = gated_update(st_, r, H, np.eye(2))
    assert out is UpdateOutcome.GATED and new is st_


def test_singular_innovation_flagged():
    st_ = FilterState(np.zeros(BASE_DIM), np.zeros((BASE_DIM, BASE_DIM)), 0.0)
    st_.mean[QUAT] = [1, 0, 0, 0]
    H = np.zeros((1, BASE_DIM))
    assert gated_update(st_, [1.0], H, [[0.0]])[1] is UpdateOutcome.SINGULAR


def test_update_renormalizes_quaternions_and_stays_psd():
    rng = np.random.default_rng(10)
    st_ = _random_state(rng, 2)
    for _ in range(20):
        H = rng.normal(size=(3, st_.dim))
        st_, _ = gated_update(st_, rng.normal(size=3) * 0.01, H, 0.1 * np.eye(3), None)
    for s in (0, 1, 2):
        q = st_.mean[QUAT] if s == 0 else st_.mean[slot_slice(s)][3:]
        assert abs(np.linalg.norm(q) - 1) < 1e-9
    assert np.linalg.eigvalsh(st_.cov).min() >= -1e-9 * np.trace(st_.cov)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 0.99), min_size=1, max_size=30))
def test_stationary_below_threshold(d):
    disp = np.column_stack([d, np.zeros(len(d))])
    assert is_stationary(disp, 1.0)


def test_stationarity_examples():
    assert is_stationary(np.zeros((5, 2)), 1.0)
    assert not is_stationary([[50.0, 0.0], [0, 0]], 50.0)
    assert is_stationary([[0.3, 0], [0, 0.4], [0.9, 0]], 1.0)
    assert not is_stationary(np.zeros((0, 2)), 1.0)
