"""Tests for points, transforms, and point-set fits."""

import numpy as np
import pytest

from voxelmatch.errors import DegenerateGeometry, MismatchedLengths
from voxelmatch.geometry import (
    AffineTransform,
    Point3,
    RigidTransform,
    apply,
    fit_affine,
    fit_rigid,
    fit_rigid_trimmed,
    rigid_about,
    rotation_matrix,
)


def quaternion_rigid_fit(src, dst):
    """Independent closed-form oracle: unit-quaternion eigenvector method.

    Maximizes the trace form of the rigid objective via the largest
    eigenvector of the 4x4 cross-covariance matrix, a different derivation
    and code path than the SVD solver under test.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    p = src - cs
    q = dst - cd
    s = p.T @ q
    sxx, sxy, sxz = s[0]
    syx, syy, syz = s[1]
    szx, szy, szz = s[2]
    n = np.array(
        [
            [sxx + syy + szz, syz - szy, szx - sxz, sxy - syx],
            [syz - szy, sxx - syy - szz, sxy + syx, szx + sxz],
            [szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy],
            [sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz],
        ]
    )
    vals, vecs = np.linalg.eigh(n)
    w, x, y, z = vecs[:, np.argmax(vals)]
    r = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )
    return r, cd - r @ cs


def random_rigid(rng) -> RigidTransform:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-np.pi, np.pi)
    return RigidTransform(rotation_matrix(axis, angle), rng.uniform(-10, 10, 3))


class TestFitRigid:
    def test_identity(self):
        pts = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)
        rig, report = fit_rigid(pts, pts)
        np.testing.assert_allclose(rig.rotation, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(rig.translation, 0, atol=1e-12)
        assert report.residual_sum_squares < 1e-24

    def test_exact_rotation_translation(self):
        src = np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]], dtype=float)
        r90 = rotation_matrix((0, 0, 1), np.pi / 2)
        dst = src @ r90.T + np.array([1.0, 2.0, 3.0])
        rig, report = fit_rigid(src, dst)
        np.testing.assert_allclose(rig.rotation, r90, atol=1e-12)
        np.testing.assert_allclose(rig.translation, [1, 2, 3], atol=1e-12)
        assert report.residual_sum_squares < 1e-18

    @pytest.mark.parametrize("seed", [0, 1, 2, 3, 4])
    def test_matches_quaternion_oracle_under_noise(self, seed):
        rng = np.random.default_rng(seed)
        src = rng.uniform(-20, 20, (100, 3))
        truth = random_rigid(rng)
        dst = truth.apply_array(src) + rng.normal(0, 0.01, (100, 3))
        rig, _ = fit_rigid(src, dst)
        r_o, t_o = quaternion_rigid_fit(src, dst)
        np.testing.assert_allclose(rig.rotation, r_o, atol=1e-9)
        np.testing.assert_allclose(rig.translation, t_o, atol=1e-9)

    def test_mismatched_lengths(self):
        with pytest.raises(MismatchedLengths):
            fit_rigid(np.zeros((4, 3)), np.zeros((5, 3)))

    def test_too_few_points(self):
        with pytest.raises(DegenerateGeometry):
            fit_rigid(np.zeros((2, 3)), np.zeros((2, 3)))

    def test_collinear_source(self):
        src = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], dtype=float)
        with pytest.raises(DegenerateGeometry):
            fit_rigid(src, src)

    def test_point3_inputs(self):
        src = [Point3(0, 0, 0), Point3(1, 0, 0), Point3(0, 1, 0), Point3(0, 0, 1)]
        rig, _ = fit_rigid(src, src)
        np.testing.assert_allclose(rig.rotation, np.eye(3), atol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_perturbation_never_improves(self, seed):
        rng = np.random.default_rng(100 + seed)
        src = rng.uniform(-10, 10, (40, 3))
        truth = random_rigid(rng)
        dst = truth.apply_array(src) + rng.normal(0, 0.05, src.shape)
        rig, report = fit_rigid(src, dst)
        base = report.residual_sum_squares
        for _ in range(20):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            d_rot = rotation_matrix(axis, np.deg2rad(rng.uniform(0, 1.0)))
            r_p = rig.rotation @ d_rot
            t_p = rig.translation + rng.uniform(-0.1, 0.1, 3)
            perturbed = ((dst - (src @ r_p.T + t_p)) ** 2).sum()
            assert perturbed >= base - 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_orthonormal_on_near_planar_inputs(self, seed):
        rng = np.random.default_rng(200 + seed)
        src = rng.uniform(-10, 10, (30, 3))
        src[:, 2] *= 1e-6  # almost flat: reflection-prone
        truth = random_rigid(rng)
        dst = truth.apply_array(src) + rng.normal(0, 0.1, src.shape)
        rig, _ = fit_rigid(src, dst)
        np.testing.assert_allclose(rig.rotation.T @ rig.rotation, np.eye(3), atol=1e-9)
        assert abs(np.linalg.det(rig.rotation) - 1.0) < 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_equivariance_under_common_rotation(self, seed):
        rng = np.random.default_rng(300 + seed)
        src = rng.uniform(-10, 10, (25, 3))
        truth = random_rigid(rng)
        dst = truth.apply_array(src) + rng.normal(0, 0.02, src.shape)
        q = random_rigid(rng)
        rig, _ = fit_rigid(src, dst)
        rig_q, _ = fit_rigid(q.apply_array(src), q.apply_array(dst))
        conjugated = q.rotation @ rig.rotation @ q.rotation.T
        np.testing.assert_allclose(rig_q.rotation, conjugated, atol=1e-9)


class TestFitAffine:
    def test_identity(self):
        rng = np.random.default_rng(0)
        src = rng.uniform(-5, 5, (5, 3))
        aff, report = fit_affine(src, src)
        np.testing.assert_allclose(aff.linear, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(aff.translation, 0, atol=1e-9)

    def test_exact_scale_and_shift(self):
        rng = np.random.default_rng(1)
        src = rng.uniform(-5, 5, (6, 3))
        linear = np.diag([2.0, 1.0, 1.0])
        dst = src @ linear.T + np.array([0.0, 0.0, 1.0])
        aff, report = fit_affine(src, dst)
        np.testing.assert_allclose(aff.linear, linear, atol=1e-9)
        np.testing.assert_allclose(aff.translation, [0, 0, 1], atol=1e-9)
        assert report.residual_sum_squares < 1e-18

    def test_residual_not_worse_than_generator(self):
        rng = np.random.default_rng(2)
        src = rng.uniform(-5, 5, (50, 3))
        linear = np.eye(3) + rng.normal(0, 0.1, (3, 3))
        shift = rng.uniform(-2, 2, 3)
        dst = src @ linear.T + shift + rng.normal(0, 0.05, src.shape)
        aff, report = fit_affine(src, dst)
        generator_resid = ((dst - (src @ linear.T + shift)) ** 2).sum()
        assert report.residual_sum_squares <= generator_resid + 1e-12

    def test_coplanar_source_rejected(self):
        src = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [2, 1, 0]], dtype=float)
        with pytest.raises(DegenerateGeometry):
            fit_affine(src, src)

    def test_reduces_to_rigid_on_rigid_data(self):
        rng = np.random.default_rng(3)
        src = rng.uniform(-10, 10, (30, 3))
        truth = random_rigid(rng)
        dst = truth.apply_array(src)
        aff, _ = fit_affine(src, dst)
        np.testing.assert_allclose(aff.linear.T @ aff.linear, np.eye(3), atol=1e-9)
        np.testing.assert_allclose(aff.linear, truth.rotation, atol=1e-9)


class TestFitRigidTrimmed:
    def test_zero_trim_equals_plain_fit(self):
        rng = np.random.default_rng(4)
        src = rng.uniform(-10, 10, (20, 3))
        truth = random_rigid(rng)
        dst = truth.apply_array(src) + rng.normal(0, 0.1, src.shape)
        rig_a, rep_a = fit_rigid(src, dst)
        rig_b, rep_b = fit_rigid_trimmed(src, dst, 0.0)
        np.testing.assert_allclose(rig_a.rotation, rig_b.rotation, atol=1e-12)
        np.testing.assert_allclose(rig_a.translation, rig_b.translation, atol=1e-12)
        assert rep_b.inlier_mask.all()

    def test_outliers_excluded_and_generator_recovered(self):
        rng = np.random.default_rng(5)
        src = rng.uniform(-10, 10, (22, 3))
        truth = random_rigid(rng)
        dst = truth.apply_array(src)
        dst[5] += 40.0
        dst[17] -= 35.0
        rig, report = fit_rigid_trimmed(src, dst, 0.2)
        assert not report.inlier_mask[5]
        assert not report.inlier_mask[17]
        np.testing.assert_allclose(rig.rotation, truth.rotation, atol=1e-9)
        np.testing.assert_allclose(rig.translation, truth.translation, atol=1e-9)

    def test_exact_pairs_keep_full_mask(self):
        rng = np.random.default_rng(6)
        src = rng.uniform(-10, 10, (15, 3))
        truth = random_rigid(rng)
        rig, report = fit_rigid_trimmed(src, truth.apply_array(src), 0.0)
        assert report.inlier_mask.all()

    def test_overtrimming_rejected(self):
        with pytest.raises(DegenerateGeometry):
            fit_rigid_trimmed(np.zeros((4, 3)), np.zeros((4, 3)), 0.5)


class TestApply:
    def test_identity_on_point(self):
        p = Point3(1.5, -2.0, 3.0)
        out = apply(RigidTransform.identity(), p)
        assert out == p

    def test_rotation_90z(self):
        rig = RigidTransform(rotation_matrix((0, 0, 1), np.pi / 2), np.zeros(3))
        out = apply(rig, Point3(1, 0, 0))
        np.testing.assert_allclose([out.x, out.y, out.z], [0, 1, 0], atol=1e-12)

    def test_inverse_round_trip(self):
        rng = np.random.default_rng(7)
        rig = random_rigid(rng)
        pts = rng.uniform(-10, 10, (30, 3))
        back = rig.inverse().apply_array(rig.apply_array(pts))
        np.testing.assert_allclose(back, pts, atol=1e-12)

    def test_affine_inverse_round_trip(self):
        rng = np.random.default_rng(8)
        aff = AffineTransform(np.eye(3) + rng.normal(0, 0.2, (3, 3)), rng.uniform(-3, 3, 3))
        pts = rng.uniform(-10, 10, (10, 3))
        np.testing.assert_allclose(aff.inverse().apply_array(aff.apply_array(pts)), pts, atol=1e-9)

    def test_list_of_points(self):
        rig = rigid_about(rotation_matrix((0, 0, 1), np.pi), center=(1, 1, 0))
        pts = [Point3(0, 0, 0), Point3(2, 2, 0)]
        out = apply(rig, pts)
        np.testing.assert_allclose([out[0].x, out[0].y], [2, 2], atol=1e-12)
        np.testing.assert_allclose([out[1].x, out[1].y], [0, 0], atol=1e-12)


class TestValidation:
    def test_rejects_reflection(self):
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            RigidTransform(np.eye(3) * 1.5, np.zeros(3))

    def test_point_must_be_finite(self):
        with pytest.raises(ValueError):
            Point3(np.nan, 0, 0)

    def test_singular_affine_inverse(self):
        aff = AffineTransform(np.zeros((3, 3)), np.zeros(3))
        with pytest.raises(DegenerateGeometry):
            aff.inverse()
