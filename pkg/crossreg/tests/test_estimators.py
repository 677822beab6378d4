"""Tests for the weighted SVD, RANSAC and local-to-global pose estimators."""

import numpy as np
import pytest

from conftest import z_rotation
from errors import EstimationError
from models import CorrespondenceSet, EstimatorConfig, EstimatorVariant, Granularity, PointCloud
from stages import core, estimators
from stages.selftest import corrupted_group_instance, outlier_instance


def identity_pairs(n: int, confidence=None) -> CorrespondenceSet:
    index = np.arange(n)
    return CorrespondenceSet(pairs=np.stack([index, index], axis=1), confidence=confidence)


# ── Procrustes ──────────────────────────────────────────────────────────

class TestProcrustes:

    def test_recovers_transform(self, rng, random_transform):
        source = rng.uniform(-5.0, 5.0, size=(20, 3))
        rotation, translation = estimators.procrustes(source, core.transform_points(random_transform, source))
        assert core.rre(rotation, random_transform.rotation) < 1e-7
        assert core.rte(translation, random_transform.translation) < 1e-9

    def test_proper_rotation_for_mirrored_input(self, rng):
        source = rng.uniform(-5.0, 5.0, size=(20, 3))
        target = source * np.array([1.0, 1.0, -1.0])
        rotation, _ = estimators.procrustes(source, target)
        assert np.linalg.det(rotation) == pytest.approx(1.0)

    def test_zero_weight_outlier_ignored(self, rng):
        gt = z_rotation(30.0, (1.0, 2.0, 3.0))
        source = rng.uniform(-5.0, 5.0, size=(10, 3))
        target = core.transform_points(gt, source)
        target[0] += 50.0
        weights = np.ones(10)
        weights[0] = 0.0
        rotation, translation = estimators.procrustes(source, target, weights)
        assert core.rre(rotation, gt.rotation) < 1e-7
        assert core.rte(translation, gt.translation) < 1e-9

    def test_underdetermined(self, rng):
        with pytest.raises(EstimationError, match="underdetermined"):
            estimators.procrustes(rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))
        with pytest.raises(EstimationError, match="underdetermined"):
            estimators.procrustes(rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), np.array([1.0, 1.0, 0.0, 0.0]))

    def test_collinear_is_degenerate(self):
        line = np.outer(np.arange(5.0), [1.0, 2.0, 0.5])
        with pytest.raises(EstimationError, match="degenerate"):
            estimators.procrustes(line, line + 1.0)

    def test_coincident_is_degenerate(self):
        with pytest.raises(EstimationError, match="degenerate"):
            estimators.procrustes(np.ones((5, 3)), np.ones((5, 3)))


# ── Weighted SVD and RANSAC ─────────────────────────────────────────────

class TestGlobalEstimators:

    def test_weighted_svd_counts_inliers(self, rng, random_transform):
        source = PointCloud(points=rng.uniform(-5.0, 5.0, size=(12, 3)))
        target = core.apply_transform(random_transform, source)
        pose = estimators.weighted_svd(identity_pairs(12), source, target)
        assert pose.inlier_count == 12
        assert pose.mean_residual < 1e-9
        assert pose.variant == EstimatorVariant.WEIGHTED_SVD

    def test_weighted_svd_needs_three_pairs(self, random_cloud):
        with pytest.raises(EstimationError, match="underdetermined"):
            estimators.weighted_svd(identity_pairs(2), random_cloud, random_cloud)

    def test_out_of_bounds_indices(self, random_cloud):
        c = CorrespondenceSet(pairs=[[0, 0], [1, 1], [2, 9999]])
        with pytest.raises(EstimationError, match="out of bounds"):
            estimators.weighted_svd(c, random_cloud, random_cloud)

    def test_ransac_survives_outliers(self, rng):
        source, target, c, gt = outlier_instance(rng)
        cfg = EstimatorConfig(variant=EstimatorVariant.RANSAC, ransac_iterations=2000, seed=3)
        pose = estimators.ransac(c, source, target, cfg)
        assert core.rre(pose.transform.rotation, gt.rotation) < 0.1
        assert pose.inlier_count >= 140

    def test_ransac_chunking_is_deterministic(self, rng):
        source, target, c, _ = outlier_instance(rng, n=60)
        cfg = EstimatorConfig(variant=EstimatorVariant.RANSAC, ransac_iterations=600, ransac_chunk=100, seed=11)
        first = estimators.ransac(c, source, target, cfg)
        second = estimators.ransac(c, source, target, cfg)
        np.testing.assert_array_equal(first.transform.rotation, second.transform.rotation)
        np.testing.assert_array_equal(first.transform.translation, second.transform.translation)

    def test_ransac_no_consensus(self, rng):
        source = PointCloud(points=rng.uniform(-50.0, 50.0, size=(10, 3)))
        target = PointCloud(points=rng.uniform(-50.0, 50.0, size=(10, 3)))
        cfg = EstimatorConfig(variant=EstimatorVariant.RANSAC, ransac_iterations=50, inlier_threshold=1e-6)
        with pytest.raises(EstimationError, match="no consensus"):
            estimators.ransac(identity_pairs(10), source, target, cfg)


# ── Local-to-global ─────────────────────────────────────────────────────

class TestLgr:

    def test_corrupted_group_is_outvoted(self, rng):
        source, target, c_super, groups, gt = corrupted_group_instance(rng)
        pose = estimators.lgr(c_super, groups, source, target, EstimatorConfig())
        assert core.rre(pose.transform.rotation, gt.rotation) < 0.1
        assert core.rte(pose.transform.translation, gt.translation) < 0.01
        assert pose.refinement_costs == sorted(pose.refinement_costs, reverse=True)

    def test_single_group(self, rng, random_transform):
        source = PointCloud(points=rng.uniform(-5.0, 5.0, size=(8, 3)))
        target = core.apply_transform(random_transform, source)
        c_super = CorrespondenceSet(pairs=[[0, 0]], granularity=Granularity.SUPERPOINT)
        pose = estimators.lgr(c_super, [identity_pairs(8)], source, target, EstimatorConfig())
        assert core.rre(pose.transform.rotation, random_transform.rotation) < 1e-6
        assert pose.inlier_count == 8

    def test_small_groups_give_no_candidate(self, random_cloud):
        groups = [identity_pairs(2), CorrespondenceSet(pairs=[[5, 5], [6, 6]])]
        c_super = CorrespondenceSet(pairs=[[0, 0], [1, 1]], granularity=Granularity.SUPERPOINT)
        with pytest.raises(EstimationError, match="no group"):
            estimators.lgr(c_super, groups, random_cloud, random_cloud, EstimatorConfig())

    def test_collinear_groups_are_pooled_into_a_pose(self, rng, random_transform):
        # Each group alone is a line segment and cannot fix a rotation
        directions = np.eye(3)[[0, 1, 2, 0]]
        centers = np.array([[0.0, 0.0, 0.0], [6.0, 1.0, 0.0], [-3.0, 5.0, 2.0], [2.0, -6.0, 1.0]])
        steps = np.linspace(-1.0, 1.0, 4)[:, None]
        source = PointCloud(points=np.vstack([c + steps * d for c, d in zip(centers, directions)]))
        target = core.apply_transform(random_transform, source)
        index = np.arange(16).reshape(4, 4)
        groups = [CorrespondenceSet(pairs=np.stack([row, row], axis=1)) for row in index]
        c_super = CorrespondenceSet(pairs=np.stack([np.arange(4)] * 2, axis=1), granularity=Granularity.SUPERPOINT)

        with pytest.raises(EstimationError, match="no group"):
            estimators.lgr(c_super, groups, source, target, EstimatorConfig(lgr_seed_neighbors=0))
        pose = estimators.lgr(c_super, groups, source, target, EstimatorConfig())
        assert core.rre(pose.transform.rotation, random_transform.rotation) < 1e-6
        assert pose.inlier_count == 16

    def test_group_compatibility(self, rng, random_transform):
        centroids = rng.uniform(-10.0, 10.0, size=(4, 3))
        moved = core.transform_points(random_transform, centroids)
        moved[3] += np.array([100.0, 0.0, 0.0])
        second_order, soft = estimators.group_compatibility(centroids, moved, 1.5)
        np.testing.assert_allclose(second_order[:3, :3], 3.0 * np.ones((3, 3)))
        assert np.all(np.diag(soft) == 0.0)
        np.testing.assert_allclose(soft[0, 1], 1.0)
        assert np.all(soft[soft > 0] <= 1.0)
        assert np.array_equal(second_order, second_order.T)

    def test_leading_eigenvector(self):
        np.testing.assert_allclose(estimators.leading_eigenvector(np.ones((3, 3)) - np.eye(3)), np.ones(3))
        np.testing.assert_allclose(estimators.leading_eigenvector(np.zeros((2, 2))), np.ones(2))
        pair_only = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        np.testing.assert_allclose(estimators.leading_eigenvector(pair_only), [1.0, 1.0, 0.0])

    def test_truncated_cost(self):
        assert estimators.truncated_cost(np.array([0.1, 0.2, 5.0]), 0.5) == pytest.approx(0.8 / 3)
        assert estimators.truncated_cost(np.zeros(0), 0.5) == 0.0


# ── Dispatch ────────────────────────────────────────────────────────────

class TestEstimate:

    @pytest.mark.parametrize("variant", list(EstimatorVariant))
    def test_every_variant_recovers_clean_pose(self, rng, random_transform, variant):
        source = PointCloud(points=rng.uniform(-5.0, 5.0, size=(30, 3)))
        target = core.apply_transform(random_transform, source)
        index = np.arange(30).reshape(3, 10)
        groups = [CorrespondenceSet(pairs=np.stack([row, row], axis=1)) for row in index]
        c_super = CorrespondenceSet(pairs=[[0, 0], [1, 1], [2, 2]], granularity=Granularity.SUPERPOINT)
        cfg = EstimatorConfig(variant=variant, ransac_iterations=200)
        pose = estimators.estimate(c_super, groups, source, target, cfg)
        assert pose.variant == variant
        assert core.rre(pose.transform.rotation, random_transform.rotation) < 1e-6

    def test_weighted_svd_counts_with_inlier_threshold(self, rng, random_transform):
        source = PointCloud(points=rng.uniform(-5.0, 5.0, size=(20, 3)))
        target = PointCloud(points=core.transform_points(random_transform, source.points)
                            + rng.normal(scale=0.01, size=(20, 3)))
        groups = [identity_pairs(20)]
        c_super = CorrespondenceSet(pairs=[[0, 0]], granularity=Granularity.SUPERPOINT)
        strict = EstimatorConfig(variant=EstimatorVariant.WEIGHTED_SVD, inlier_threshold=1e-6)
        loose = strict.model_copy(update={"inlier_threshold": 1.0})
        assert estimators.estimate(c_super, groups, source, target, strict).inlier_count == 0
        assert estimators.estimate(c_super, groups, source, target, loose).inlier_count == 20
