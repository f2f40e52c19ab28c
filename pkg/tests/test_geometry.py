import numpy as np
import pytest

from twistreg.errors import DegenerateBlendError
from twistreg.geometry import (
    DualQuaternion,
    PointCloud,
    RigidTransform,
    apply_twist,
    blend_node_transforms,
    dq_to_rigid,
    dqb_blend,
    point_twist_jacobian,
    quat_conjugate,
    quat_from_rotation,
    quat_multiply,
    rigid_to_dq,
    rotation_about_axis,
    rotation_angle,
    skew,
    twist_exp,
)


def random_rotation(rng):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return rotation_about_axis(axis, rng.uniform(-np.pi, np.pi))


def random_transform(rng, scale=1.0):
    return RigidTransform(random_rotation(rng), rng.normal(size=3) * scale)


class TestSkew:
    def test_matches_cross_product(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            v, u = rng.normal(size=3), rng.normal(size=3)
            np.testing.assert_allclose(skew(v) @ u, np.cross(v, u), atol=1e-14)

    def test_antisymmetric(self):
        S = skew(np.array([1.0, 2.0, 3.0]))
        np.testing.assert_array_equal(S, -S.T)


class TestTwistExp:
    def test_zero_twist_is_identity(self):
        T = twist_exp(np.zeros(6))
        np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(T.translation, np.zeros(3), atol=1e-15)

    def test_pure_translation(self):
        # (0,0,0,a,b,c) from identity translates by exactly (a,b,c)
        T = twist_exp(np.array([0, 0, 0, 0.3, -0.2, 0.7]))
        np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(T.translation, [0.3, -0.2, 0.7], atol=1e-15)

    def test_pure_rotation_angle(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            omega = rng.normal(size=3)
            T = twist_exp(np.concatenate([omega, np.zeros(3)]))
            angle = np.linalg.norm(omega)
            expected = angle if angle <= np.pi else 2 * np.pi - angle % (2 * np.pi)
            assert rotation_angle(T.rotation) == pytest.approx(expected % (2 * np.pi)
                                                               if expected <= np.pi else expected,
                                                               abs=1e-9)

    def test_matches_matrix_exponential(self):
        from scipy.linalg import expm

        rng = np.random.default_rng(2)
        for _ in range(20):
            tw = rng.normal(size=6)
            M = np.zeros((4, 4))
            M[:3, :3] = skew(tw[:3])
            M[:3, 3] = tw[3:]
            np.testing.assert_allclose(twist_exp(tw).matrix(), expm(M), atol=1e-10)

    def test_small_angle_series(self):
        from scipy.linalg import expm

        for eps in (1e-12, 1e-10, 1e-8):
            tw = np.array([eps, -eps, eps / 2, 0.1, 0.2, 0.3])
            M = np.zeros((4, 4))
            M[:3, :3] = skew(tw[:3])
            M[:3, 3] = tw[3:]
            np.testing.assert_allclose(twist_exp(tw).matrix(), expm(M), atol=1e-13)


class TestApplyTwist:
    def test_zero_twist_returns_input_bitwise(self):
        rng = np.random.default_rng(3)
        T = random_transform(rng)
        T2 = apply_twist(np.zeros(6), T)
        assert T2 is T

    def test_composition_with_zero_is_exact(self):
        rng = np.random.default_rng(4)
        tw = rng.normal(size=6)
        T = random_transform(rng)
        a = apply_twist(tw, apply_twist(np.zeros(6), T))
        b = apply_twist(tw, T)
        np.testing.assert_array_equal(a.rotation, b.rotation)
        np.testing.assert_array_equal(a.translation, b.translation)

    def test_orthonormality_preserved_over_long_chains(self):
        # 10000 random small updates must keep R^T R = I to 1e-9
        rng = np.random.default_rng(5)
        T = RigidTransform.identity()
        for _ in range(10000):
            T = apply_twist(rng.normal(size=6) * 1e-2, T)
        err = np.abs(T.rotation.T @ T.rotation - np.eye(3)).max()
        assert err <= 1e-9
        assert np.linalg.det(T.rotation) == pytest.approx(1.0, abs=1e-9)


class TestPointTwistJacobian:
    def test_shape_and_blocks(self):
        x = np.array([[1.0, 2.0, 3.0]])
        J = point_twist_jacobian(x)
        assert J.shape == (1, 3, 6)
        np.testing.assert_array_equal(J[0, :, :3], -skew(x[0]))
        np.testing.assert_array_equal(J[0, :, 3:], np.eye(3))

    def test_matches_finite_differences(self):
        # central differences of exp(eps * e_k) x around the identity chart
        rng = np.random.default_rng(6)
        eps = 1e-6
        for _ in range(10):
            x = rng.normal(size=3) * 2.0
            J = point_twist_jacobian(x[None])[0]
            J_fd = np.zeros((3, 6))
            for k in range(6):
                tw = np.zeros(6)
                tw[k] = eps
                plus = twist_exp(tw).apply(x)
                tw[k] = -eps
                minus = twist_exp(tw).apply(x)
                J_fd[:, k] = (plus - minus) / (2 * eps)
            np.testing.assert_allclose(J, J_fd, atol=1e-9)


class TestRigidTransform:
    def test_compose_inverse_roundtrip(self):
        rng = np.random.default_rng(7)
        for _ in range(10):
            T = random_transform(rng)
            I = T.compose(T.inverse())
            np.testing.assert_allclose(I.rotation, np.eye(3), atol=1e-12)
            np.testing.assert_allclose(I.translation, np.zeros(3), atol=1e-12)

    def test_apply_matches_matrix(self):
        rng = np.random.default_rng(8)
        T = random_transform(rng)
        pts = rng.normal(size=(5, 3))
        hom = np.c_[pts, np.ones(5)]
        np.testing.assert_allclose(T.apply(pts), (hom @ T.matrix().T)[:, :3], atol=1e-13)

    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3) * 2.0, np.zeros(3))

    def test_rejects_non_finite(self):
        R = np.eye(3)
        with pytest.raises(ValueError):
            RigidTransform(R, np.array([np.nan, 0, 0]))


class TestPointCloud:
    def test_rejects_bad_shapes(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((4, 2)))
        with pytest.raises(ValueError):
            PointCloud(np.zeros((0, 3)))
        with pytest.raises(ValueError):
            PointCloud(np.zeros((4, 3)), normals=np.zeros((3, 3)))

    def test_transform_rotates_normals(self):
        rng = np.random.default_rng(9)
        T = random_transform(rng)
        n = rng.normal(size=(6, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        cloud = PointCloud(rng.normal(size=(6, 3)), normals=n)
        moved = cloud.transformed(T)
        np.testing.assert_allclose(np.linalg.norm(moved.normals, axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(moved.normals, n @ T.rotation.T, atol=1e-12)

    def test_diameter(self):
        cloud = PointCloud(np.array([[0.0, 0, 0], [1.0, 2.0, 2.0]]))
        assert cloud.diameter() == pytest.approx(3.0)


class TestQuaternions:
    def test_multiply_matches_rotation_composition(self):
        rng = np.random.default_rng(10)
        for _ in range(10):
            Ra, Rb = random_rotation(rng), random_rotation(rng)
            qa, qb = quat_from_rotation(Ra), quat_from_rotation(Rb)
            qab = quat_multiply(qa, qb)
            np.testing.assert_allclose(
                np.abs(np.dot(qab, quat_from_rotation(Ra @ Rb))), 1.0, atol=1e-12)

    def test_roundtrip(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            R = random_rotation(rng)
            from twistreg.geometry import rotation_from_quat
            np.testing.assert_allclose(rotation_from_quat(quat_from_rotation(R)), R,
                                       atol=1e-12)

    def test_conjugate_inverts_unit_quaternion(self):
        q = quat_from_rotation(rotation_about_axis([0, 0, 1], 0.7))
        np.testing.assert_allclose(quat_multiply(q, quat_conjugate(q)),
                                   [1, 0, 0, 0], atol=1e-14)


class TestDualQuaternions:
    def test_rigid_roundtrip(self):
        rng = np.random.default_rng(12)
        for _ in range(20):
            T = random_transform(rng)
            T2 = dq_to_rigid(rigid_to_dq(T))
            np.testing.assert_allclose(T2.rotation, T.rotation, atol=1e-12)
            np.testing.assert_allclose(T2.translation, T.translation, atol=1e-12)

    def test_unit_constraint_after_normalization(self):
        rng = np.random.default_rng(13)
        dq = DualQuaternion(rng.normal(size=4), rng.normal(size=4)).normalized()
        assert np.linalg.norm(dq.real) == pytest.approx(1.0, abs=1e-12)
        assert abs(np.dot(dq.real, dq.dual)) <= 1e-9

    def test_blend_two_z_rotations_matches_quaternion_average(self):
        # 0 and 90 degrees about z at weights 0.5/0.5: oracle is the
        # normalized quaternion sum
        Ta = RigidTransform.identity()
        Tb = RigidTransform(rotation_about_axis([0, 0, 1], np.pi / 2), np.zeros(3))
        blended = dqb_blend([rigid_to_dq(Ta), rigid_to_dq(Tb)], np.array([0.5, 0.5]))
        qa, qb = quat_from_rotation(Ta.rotation), quat_from_rotation(Tb.rotation)
        expected = (0.5 * qa + 0.5 * qb)
        expected /= np.linalg.norm(expected)
        np.testing.assert_allclose(blended.real, expected, atol=1e-12)
        # the blend of two pure rotations stays a pure rotation
        T = dq_to_rigid(blended)
        np.testing.assert_allclose(T.translation, np.zeros(3), atol=1e-12)
        assert rotation_angle(T.rotation) == pytest.approx(np.pi / 4, abs=1e-12)

    def test_blend_weight_one_recovers_input(self):
        rng = np.random.default_rng(14)
        T = random_transform(rng)
        blended = dqb_blend([rigid_to_dq(T)], np.array([1.0]))
        T2 = dq_to_rigid(blended)
        np.testing.assert_allclose(T2.rotation, T.rotation, atol=1e-12)
        np.testing.assert_allclose(T2.translation, T.translation, atol=1e-12)

    def test_blend_is_sign_invariant(self):
        rng = np.random.default_rng(15)
        T1, T2 = random_transform(rng), random_transform(rng)
        d1, d2 = rigid_to_dq(T1), rigid_to_dq(T2)
        flipped = DualQuaternion(-d2.real, -d2.dual)
        w = np.array([0.3, 0.7])
        a = dqb_blend([d1, d2], w)
        b = dqb_blend([d1, flipped], w)
        np.testing.assert_allclose(a.real, b.real, atol=1e-12)
        np.testing.assert_allclose(a.dual, b.dual, atol=1e-12)

    def test_degenerate_blend_raises(self):
        # two opposite pi-rotations orthogonal to the (zero-weight) reference:
        # the hemisphere fix keys off the first element and cannot repair this
        ref = DualQuaternion([1.0, 0, 0, 0], np.zeros(4))
        da = DualQuaternion([0.0, 1.0, 0, 0], np.zeros(4))
        db = DualQuaternion([0.0, -1.0, 0, 0], np.zeros(4))
        with pytest.raises(DegenerateBlendError):
            dqb_blend([ref, da, db], np.array([0.0, 0.5, 0.5]))

    def test_vectorized_blend_matches_scalar(self):
        rng = np.random.default_rng(16)
        n_nodes, n_pts, K = 6, 40, 3
        dqs = []
        for _ in range(n_nodes):
            dqs.append(rigid_to_dq(random_transform(rng)))
        table = np.stack([np.concatenate([d.real, d.dual]) for d in dqs])
        idx = rng.integers(0, n_nodes, size=(n_pts, K))
        w = rng.uniform(0.1, 1.0, size=(n_pts, K))
        w /= w.sum(axis=1, keepdims=True)
        R, t = blend_node_transforms(table, idx, w)
        for i in range(n_pts):
            ref = dqb_blend([dqs[j] for j in idx[i]], w[i])
            T = dq_to_rigid(ref)
            np.testing.assert_allclose(R[i], T.rotation, atol=1e-10)
            np.testing.assert_allclose(t[i], T.translation, atol=1e-10)
