"""Tests for the overlap mask predictor and its weight files."""

import numpy as np
import pytest

from errors import AttentionError, FormatError
from models import ImageFeatureGrid, OmpConfig, OmpWeights, OverlapProbabilities, PointCloud
from stages import core, omp


def feature_grid(rng, height=8, width=10, dim=16) -> ImageFeatureGrid:
    features = rng.normal(size=(height, width, dim))
    features /= np.linalg.norm(features, axis=2, keepdims=True)
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return ImageFeatureGrid(features=features, coords=np.stack([rows, cols], axis=2).astype(np.float64))


@pytest.fixture
def weights():
    return omp.default_omp_weights(image_dim=16, super_dim=24, unified_dim=32, heads=4, mlp_hidden=8)


# ── Prediction ──────────────────────────────────────────────────────────

class TestPrediction:

    def test_default_weights_give_one_half(self, rng, weights):
        probabilities, _ = omp.predict_mask(feature_grid(rng), rng.normal(size=(30, 24)), weights, 0.3)
        np.testing.assert_allclose(probabilities.values, 0.5)

    def test_threshold_is_strict(self, rng, weights):
        _, mask = omp.predict_mask(feature_grid(rng), rng.normal(size=(30, 24)), weights, 0.5)
        assert not mask.values.any()
        _, mask = omp.predict_mask(feature_grid(rng), rng.normal(size=(30, 24)), weights, 0.49)
        assert mask.values.all()

    def test_bias_on_head_moves_probability(self, rng, weights):
        shifted = weights.model_copy(update={"mlp_b2": np.array([2.0])})
        probabilities, _ = omp.predict_mask(feature_grid(rng), rng.normal(size=(5, 24)), shifted, 0.5)
        np.testing.assert_allclose(probabilities.values, 1.0 / (1.0 + np.exp(-2.0)))

    def test_fusion_weights_are_distributions(self, rng, weights):
        aligned_img, aligned_super = omp.align_features(feature_grid(rng), rng.normal(size=(7, 24)), weights)
        fused, attn = omp.fuse(aligned_super, aligned_img, weights, return_weights=True)
        assert fused.shape == (7, 32)
        assert attn.shape == (4, 7, 80)
        np.testing.assert_allclose(attn.sum(axis=2), 1.0, atol=1e-12)

    def test_align_checks_dims(self, rng, weights):
        with pytest.raises(AttentionError):
            omp.align_features(feature_grid(rng, dim=12), rng.normal(size=(7, 24)), weights)
        with pytest.raises(AttentionError):
            omp.align_features(feature_grid(rng), rng.normal(size=(7, 20)), weights)

    def test_heads_must_divide_unified_dim(self, rng):
        w = omp.default_omp_weights(image_dim=16, super_dim=24, unified_dim=30, heads=4)
        with pytest.raises(AttentionError):
            omp.predict_mask(feature_grid(rng), rng.normal(size=(5, 24)), w, 0.5)

    def test_predict_prob_shape_mismatch(self, rng, weights):
        with pytest.raises(AttentionError):
            omp.predict_overlap_prob(np.zeros((4, 32)), np.zeros((5, 32)), weights)


# ── Masks ───────────────────────────────────────────────────────────────

class TestMasks:

    def test_threshold_range(self):
        p = OverlapProbabilities(values=[0.2, 0.8])
        for bad in (0.0, 1.0, 1.5):
            with pytest.raises(AttentionError):
                omp.threshold_mask(p, bad)
        assert omp.threshold_mask(p, 0.5).values.tolist() == [False, True]

    def test_gt_overlap_mask(self, rng):
        gt = core.random_transform(rng)
        source = PointCloud(points=rng.uniform(-10.0, 10.0, size=(40, 3)))
        shared = core.apply_transform(gt, source.subset(np.arange(20)))
        far = PointCloud(points=rng.uniform(100.0, 110.0, size=(15, 3)))
        target = PointCloud(points=np.vstack([shared.points, far.points]))

        mask_src, mask_tgt = omp.gt_overlap_mask(source, target, gt, radius=0.1)
        assert mask_src.values[:20].all()
        assert mask_tgt.values[:20].all() and not mask_tgt.values[20:].any()
        assert mask_src.fraction >= 0.5

    def test_gt_overlap_radius_positive(self, random_cloud):
        with pytest.raises(AttentionError):
            omp.gt_overlap_mask(random_cloud, random_cloud, core.identity(), radius=0.0)


# ── Weights ─────────────────────────────────────────────────────────────

class TestWeights:

    def test_save_and_load(self, tmp_path, weights):
        path = str(tmp_path / "omp.bin")
        omp.save_omp_weights(path, weights)
        loaded = omp.load_omp_weights(path)
        assert loaded.heads == 4
        assert loaded.dims() == weights.dims()
        for name in loaded.ARRAY_ORDER:
            np.testing.assert_array_equal(getattr(loaded, name), getattr(weights, name))

    def test_array_order_is_not_a_field(self, weights):
        assert "ARRAY_ORDER" not in OmpWeights.model_fields
        assert set(OmpWeights.ARRAY_ORDER) <= set(OmpWeights.model_fields)
        assert all(isinstance(getattr(weights, name), np.ndarray) for name in OmpWeights.ARRAY_ORDER)

    def test_truncated_file(self, tmp_path, weights):
        path = tmp_path / "omp.bin"
        omp.save_omp_weights(str(path), weights)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError, match="truncated"):
            omp.load_omp_weights(str(path))

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "omp.bin"
        path.write_bytes(b"VGAW" + bytes(20))
        with pytest.raises(FormatError, match="bad magic"):
            omp.load_omp_weights(str(path))

    def test_resolve_defaults_shared(self):
        source, target = omp.resolve_omp_weights(OmpConfig(unified_dim=16), image_dim=16, super_dim=24)
        assert source is target
        assert source.dims() == (16, 24, 16, 32)

    def test_resolve_separate_without_path(self):
        source, target = omp.resolve_omp_weights(OmpConfig(share_weights=False), image_dim=16, super_dim=24)
        assert source is not target
        assert target.dims() == source.dims()
