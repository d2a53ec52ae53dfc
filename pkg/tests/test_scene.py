import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kinsplat.scene import (SH_C0, CameraPose, Gaussian, GaussianDeltas,
                            KinematicState, Scene, eval_sh, inverse_sigmoid,
                            normalize_quaternion, quat_mul, quat_to_rotmat,
                            realize_covariance, rgb_to_dc, sh_basis,
                            sh_basis_grad, sigmoid)

finite_quat = st.lists(
    st.floats(-2, 2, allow_nan=False), min_size=4, max_size=4
).filter(lambda q: np.linalg.norm(q) > 1e-3)


def test_sigmoid_inverse_roundtrip():
    p = np.array([0.01, 0.1, 0.5, 0.9, 0.99])
    assert np.allclose(sigmoid(inverse_sigmoid(p)), p, atol=1e-12)


def test_normalize_quaternion_zero_raises():
    with pytest.raises(ValueError):
        normalize_quaternion(np.zeros(4))


@given(finite_quat)
@settings(max_examples=50, deadline=None)
def test_quat_rotmat_is_orthonormal(q):
    R = quat_to_rotmat(normalize_quaternion(np.array(q)))
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-9)
    assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-9)


@given(finite_quat, finite_quat)
@settings(max_examples=30, deadline=None)
def test_quat_mul_matches_matrix_composition(qa, qb):
    qa = normalize_quaternion(np.array(qa))
    qb = normalize_quaternion(np.array(qb))
    lhs = quat_to_rotmat(normalize_quaternion(quat_mul(qa, qb)))
    rhs = quat_to_rotmat(qa) @ quat_to_rotmat(qb)
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_identity_quaternion_rotmat():
    assert np.allclose(quat_to_rotmat(np.array([1.0, 0, 0, 0])), np.eye(3))


def test_realize_covariance_brute_force(rng):
    # against an explicit R S S^T R^T with scipy's rotation as a second route
    from scipy.spatial.transform import Rotation

    q = normalize_quaternion(rng.normal(0, 1, 4))
    ls = rng.uniform(-3, 0, 3)
    cov = realize_covariance(q, ls)
    R = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    S = np.diag(np.exp(ls))
    expect = R @ S @ S @ R.T
    assert np.allclose(cov, expect, atol=1e-12)
    # eigenvalues equal squared scales
    assert np.allclose(np.sort(np.linalg.eigvalsh(cov)),
                       np.sort(np.exp(2 * ls)), rtol=1e-10)


def test_covariance_ignores_quaternion_magnitude():
    q = np.array([0.3, -0.5, 0.2, 0.7])
    ls = np.array([-1.0, -2.0, -0.5])
    assert np.allclose(realize_covariance(q, ls), realize_covariance(q * 3.7, ls))


# --- spherical harmonics ------------------------------------------------------

# Degree-0..3 basis at direction (1,-2,3)/sqrt(14), frozen from a separate
# evaluation of the published closed-form polynomial table.
SH_DIR = np.array([1.0, -2.0, 3.0]) / np.sqrt(14.0)
SH_BASIS_AT_DIR = np.array([
    0.28209479177387814,
    0.2611690282654090, 0.3917535423981135, -0.1305845141327045,
    -0.1560783472274399, 0.4682350416823197, 0.2928635963059115,
    -0.2341175208411598, -0.1170587604205799,
    -0.0225279689466086, -0.3310921731627340, 0.5409527810353757,
    0.0641157236359446, -0.2704763905176879, -0.2483191298720505,
    0.1239038292063472,
])


def test_sh_basis_matches_frozen_oracle():
    basis = sh_basis(SH_DIR[None], degree=3)[0]
    assert np.allclose(basis, SH_BASIS_AT_DIR, atol=1e-12)


def test_sh_basis_degree_truncation():
    full = sh_basis(SH_DIR[None], degree=3)
    for degree, k in ((0, 1), (1, 4), (2, 9)):
        part = sh_basis(SH_DIR[None], degree=degree)
        assert part.shape == (1, k)
        assert np.allclose(part, full[:, :k])


def test_sh_basis_grad_finite_difference(rng):
    dirs = rng.normal(0, 1, (5, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    grad = sh_basis_grad(dirs, degree=3)
    eps = 1e-6
    for axis in range(3):
        d = np.zeros(3)
        d[axis] = eps
        num = (sh_basis(dirs + d, 3) - sh_basis(dirs - d, 3)) / (2 * eps)
        assert np.allclose(grad[:, :, axis], num, atol=1e-8)


def test_eval_sh_degree0_is_dc_color():
    rgb = np.array([0.25, 0.5, 0.75])
    sh = np.zeros((16, 3))
    sh[0] = rgb_to_dc(rgb)
    out = eval_sh(sh, np.array([0.0, 0.0, 1.0]), degree=0)
    assert np.allclose(out, rgb, atol=1e-12)


def test_eval_sh_clamps_negative():
    sh = np.zeros((16, 3))
    sh[0] = rgb_to_dc(np.array([-0.4, 0.2, 0.9]))
    out = eval_sh(sh, np.array([0.0, 0.0, 1.0]), degree=0)
    assert out[0] == 0.0 and out[1] > 0


def test_rgb_dc_roundtrip():
    rgb = np.array([[0.1, 0.55, 0.99]])
    assert np.allclose(SH_C0 * rgb_to_dc(rgb) + 0.5, rgb)


# --- containers ----------------------------------------------------------------


def test_scene_shape_validation(rng):
    n = 4
    good = dict(
        mu=rng.normal(0, 1, (n, 3)), rot=rng.normal(0, 1, (n, 4)),
        log_scale=rng.normal(0, 1, (n, 3)), opacity_logit=rng.normal(0, 1, n),
        sh_coeffs=rng.normal(0, 1, (n, 16, 3)))
    Scene(**good)
    for key, shape in (("mu", (n, 2)), ("rot", (n, 3)), ("sh_coeffs", (n, 15, 3))):
        bad = dict(good)
        bad[key] = rng.normal(0, 1, shape)
        with pytest.raises(ValueError):
            Scene(**bad)
    with pytest.raises(ValueError):
        Scene(**good, extent=-1.0)
    with pytest.raises(ValueError):
        Scene(**good, active_sh_degree=4)


def test_scene_subset_keep_append(rng):
    n = 6
    scene = Scene(
        rng.normal(0, 1, (n, 3)), rng.normal(0, 1, (n, 4)),
        rng.normal(0, 1, (n, 3)), rng.normal(0, 1, n), rng.normal(0, 1, (n, 16, 3)))
    sub = scene.subset([1, 3])
    assert len(sub) == 2
    assert np.allclose(sub.mu[1], scene.mu[3])
    scene.keep(np.array([True, False, True, True, False, True]))
    assert len(scene) == 4
    scene.append(np.zeros((2, 3)), np.tile([1, 0, 0, 0], (2, 1)),
                 np.zeros((2, 3)), np.zeros(2), np.zeros((2, 16, 3)))
    assert len(scene) == 6 and scene.grad_accum.shape == (6,)


def test_gaussian_activation_roundtrip():
    g = Gaussian(np.array([1.0, 2, 3]), np.array([2.0, 0, 0, 0]),
                 np.log(np.array([0.1, 0.2, 0.3])), inverse_sigmoid(0.7),
                 np.zeros((16, 3)))
    mu, R, scale, opacity = g.activate()
    assert np.allclose(R, np.eye(3))
    assert np.allclose(scale, [0.1, 0.2, 0.3])
    assert opacity == pytest.approx(0.7)


def test_deltas_zeros_and_subset():
    d = GaussianDeltas.zeros(5)
    assert len(d) == 5 and not d.d_mu.any()
    s = d.subset([0, 2])
    assert len(s) == 2


def test_kinematic_state_vector_roundtrip():
    k = KinematicState(np.array([0.1, -0.2, 0.3]),
                       normalize_quaternion(np.array([0.9, 0.1, 0.2, -0.3])), 0.4)
    k2 = KinematicState.from_vector(k.as_vector())
    assert np.allclose(k2.as_vector(), k.as_vector())


# --- camera ----------------------------------------------------------------------


def test_look_at_geometry():
    eye = np.array([0.0, 0.0, -5.0])
    cam = CameraPose.look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]),
                             fx=100.0, fy=100.0, width=64, height=48)
    assert np.allclose(cam.camera_center(), eye, atol=1e-12)
    # +z camera axis points from eye toward the target
    fwd = cam.rotation[2]
    assert np.allclose(fwd, [0, 0, 1], atol=1e-12)
    # world point at the target projects to the principal point
    pt_cam = cam.rotation @ (np.zeros(3) - eye)
    assert pt_cam[2] == pytest.approx(5.0)
    assert cam.cx == pytest.approx((64 - 1) / 2)
    assert cam.cy == pytest.approx((48 - 1) / 2)


def test_camera_dict_roundtrip():
    cam = CameraPose.look_at([1.0, 2.0, -3.0], [0.1, 0, 0], [0, 1, 0],
                             fx=80.0, fy=75.0, width=32, height=32)
    cam2 = CameraPose.from_dict(cam.to_dict())
    assert np.allclose(cam2.world_to_camera, cam.world_to_camera)
    assert cam2.fx == cam.fx and cam2.height == cam.height
