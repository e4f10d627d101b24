import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.linalg import expm

from ekfvio.geometry import (
    RigidTransform, camera_pose, gravity_aligned_quaternion, kabsch, omega_matrix,
    omega_product_jacobian, quat_from_axis_angle, quat_from_rotvec, quat_multiply, quat_normalize,
    quat_to_rotation, rotate_jacobian, rotate_transpose_jacobian, rotate_x, rotate_z,
    rotation_derivative, rotation_to_quat, so3_exp, so3_log,
)

from conftest import central_diff, random_quat, rel_err

vec3 = arrays(np.float64, 3, elements=st.floats(-4.0, 4.0))
quat4 = arrays(np.float64, 4, elements=st.floats(-1.0, 1.0)).filter(
    lambda q: np.linalg.norm(q) > 0.1)


def test_omega_zero_is_identity():
    assert np.array_equal(omega_matrix(np.zeros(3)), np.eye(4))


def test_omega_matches_matrix_exponential():
    # scaling-and-squaring reference for expm(-0.5 * generator)
    rng = np.random.default_rng(0)
    for _ in range(50):
        u = rng.normal(size=3) * rng.uniform(0, 3)
        ux, uy, uz = u
        M = np.array([[0, -ux, -uy, -uz], [ux, 0, -uz, uy], [uy, uz, 0, -ux], [uz, -uy, ux, 0]])
        assert np.abs(omega_matrix(u) - expm(-0.5 * M)).max() < 1e-12


def test_omega_pi_about_x():
    q = omega_matrix([np.pi, 0, 0]) @ np.array([1.0, 0, 0, 0])
    ref = quat_from_axis_angle([1, 0, 0], -np.pi)     # world-to-local: inverse rotation
    assert min(np.abs(q - ref).max(), np.abs(q + ref).max()) < 1e-12
    R = quat_to_rotation(q)
    assert np.allclose(R, np.diag([1.0, -1.0, -1.0]), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(vec3, quat4)
def test_omega_keeps_unit_norm(u, q):
    q = quat_normalize(q)
    assert abs(np.linalg.norm(omega_matrix(u) @ q) - 1.0) < 1e-9


@settings(max_examples=100, deadline=None)
@given(vec3, arrays(np.float64, 4, elements=st.floats(-10, 10)))
def test_omega_is_orthogonal(u, v):
    O = omega_matrix(u)
    assert np.allclose(O @ O.T, np.eye(4), atol=1e-12)
    assert abs(np.linalg.norm(O @ v) - np.linalg.norm(v)) < 1e-9 * max(1.0, np.linalg.norm(v))


@settings(max_examples=100, deadline=None)
@given(vec3, st.floats(0.01, 1.0))
def test_omega_flow_property(w, dt):
    # two steps of constant rate equal one step of the summed angle
    two = omega_matrix(w * dt) @ omega_matrix(w * dt)
    assert np.abs(two - omega_matrix(2 * w * dt)).max() < 1e-9


def test_omega_composition_matches_rotation_product():
    rng = np.random.default_rng(1)
    q = random_quat(rng)
    u = rng.normal(size=3) * 0.3
    q_new = omega_matrix(u) @ q
    # world-to-local: the new local frame is the old one rotated by u (body rates)
    assert np.allclose(quat_to_rotation(q_new), so3_exp(u).T @ quat_to_rotation(q), atol=1e-12)


def test_quat_to_rotation_examples():
    assert np.allclose(quat_to_rotation([1, 0, 0, 0]), np.eye(3))
    q = quat_from_axis_angle([0, 0, 1], np.pi)
    assert np.allclose(quat_to_rotation(q), np.diag([-1.0, -1.0, 1.0]), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(quat4)
def test_rotation_is_orthonormal(q):
    R = quat_to_rotation(quat_normalize(q))
    assert np.abs(R @ R.T - np.eye(3)).max() < 1e-12
    assert abs(np.linalg.det(R) - 1.0) < 1e-12


@settings(max_examples=100, deadline=None)
@given(quat4)
def test_rotation_quaternion_round_trip(q):
    q = quat_normalize(q)
    q2 = rotation_to_quat(quat_to_rotation(q))
    assert min(np.abs(q - q2).max(), np.abs(q + q2).max()) < 1e-9


def test_quat_multiply_composes_rotations(rng):
    a, b = random_quat(rng), random_quat(rng)
    assert np.allclose(quat_to_rotation(quat_multiply(a, b)),
                       quat_to_rotation(a) @ quat_to_rotation(b), atol=1e-12)


def test_rotation_derivative_matches_finite_differences(rng):
    for _ in range(100):
        q = random_quat(rng) * rng.uniform(0.5, 2.0)      # includes the normalization
        num = central_diff(lambda x: quat_to_rotation(x).ravel(), q)
        ana = rotation_derivative(q).reshape(4, 9).T
        assert rel_err(ana, num) < 1e-4
        a = rng.normal(size=3)
        assert rel_err(rotate_jacobian(q, a), central_diff(lambda x: quat_to_rotation(x) @ a, q)) < 1e-4
        assert rel_err(rotate_transpose_jacobian(q, a),
                       central_diff(lambda x: quat_to_rotation(x).T @ a, q)) < 1e-4


def test_omega_product_jacobian_matches_finite_differences(rng):
    for k in range(100):
        q = random_quat(rng)
        # cover the small-angle branch as well
        u = rng.normal(size=3) * (1e-6 if k % 10 == 0 else rng.uniform(0.01, 2.0))
        num = central_diff(lambda x: omega_matrix(x) @ q, u, h=1e-7)
        assert rel_err(omega_product_jacobian(u, q), num) < 1e-4


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-3.0, 3.0)))
def test_so3_exp_log_round_trip(phi):
    R = so3_exp(phi)
    assert np.allclose(so3_exp(so3_log(R)), R, atol=1e-9)


def test_so3_log_near_pi():
    phi = np.array([0.0, 0.0, np.pi - 1e-6])
    assert np.allclose(so3_exp(so3_log(so3_exp(phi))), so3_exp(phi), atol=1e-9)


def test_quat_from_rotvec_matches_so3_exp(rng):
    v = rng.normal(size=3)
    assert np.allclose(quat_to_rotation(quat_from_rotvec(v)), so3_exp(v), atol=1e-12)


def test_rigid_transform_algebra(rng):
    T = RigidTransform(so3_exp(rng.normal(size=3)), rng.normal(size=3))
    I = T @ T.inverse()
    assert np.allclose(I.as_matrix(), np.eye(4), atol=1e-12)
    assert T.is_valid()
    x = rng.normal(size=(5, 3))
    assert np.allclose(T.apply(x), (T.as_matrix() @ np.c_[x, np.ones(5)].T).T[:, :3])
    assert np.allclose(RigidTransform.from_matrix(T.as_matrix()).rotation, T.rotation)


def test_camera_pose_examples(rng):
    ident = camera_pose(np.zeros(3), np.array([1.0, 0, 0, 0]), RigidTransform.identity())
    assert np.allclose(ident.as_matrix(), np.eye(4))
    t = np.array([0.1, -0.2, 0.3])
    T = camera_pose(np.zeros(3), np.array([1.0, 0, 0, 0]), RigidTransform(np.eye(3), t))
    assert np.allclose(T.translation, t)


def test_camera_pose_composition_oracle(rng):
    for _ in range(20):
        p = rng.normal(size=3)
        q = random_quat(rng)
        ext = RigidTransform(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 0.1)
        X = rng.normal(size=3) * 5
        Xc = camera_pose(p, q, ext).inverse().apply(X)
        # stepwise: world -> IMU -> camera
        x_imu = quat_to_rotation(q) @ (X - p)
        x_cam = ext.rotation.T @ (x_imu - ext.translation)
        assert np.allclose(Xc, x_cam, atol=1e-12)


@pytest.mark.parametrize("f", [(0, 0, 9.81), (9.81, 0, 0), (0, -9.81, 0), (1.0, 2.0, 9.0)])
def test_gravity_aligned_quaternion(f):
    f = np.array(f, dtype=float)
    R = quat_to_rotation(gravity_aligned_quaternion(f))
    # world-to-IMU: R^T maps the measured specific force onto +z
    up = R.T @ f
    assert np.allclose(up / np.linalg.norm(up), [0, 0, 1], atol=1e-9)


def test_kabsch_recovers_transform(rng):
    R = so3_exp(rng.normal(size=3))
    t = rng.normal(size=3)
    a = rng.normal(size=(30, 3))
    R2, t2 = kabsch(a, a @ R.T + t)
    assert np.allclose(R2, R, atol=1e-10) and np.allclose(t2, t, atol=1e-10)


def test_rotate_helpers_are_rotations():
    for R in (rotate_x(0.3), rotate_z(-1.2)):
        assert np.allclose(R @ R.T, np.eye(3))
