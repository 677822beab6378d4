"""End-to-end tests for the registration pipeline."""

import numpy as np
import pytest

from conftest import plane_cloud
from errors import ConfigError, EncodingError, StageError, StorageError
from models import (
    AttentionMode,
    EncoderConfig,
    MaskSource,
    OmpConfig,
    PipelineConfig,
    PointCloud,
    RigidTransform,
    ViewImage,
)
from stages import core, encode, pipeline


@pytest.fixture
def cloud(rng) -> PointCloud:
    return plane_cloud(rng, n=3000)


def unmasked_config(**updates) -> PipelineConfig:
    settings = {"use_omp": False, "attention_mode": AttentionMode.GEO_SELF, "salient_only": False}
    return PipelineConfig(**{**settings, **updates})


# ── Ablation presets ────────────────────────────────────────────────────

class TestAblation:

    @pytest.mark.parametrize("key, use_omp, mode", [
        ("a", False, AttentionMode.GEO_SELF),
        ("b", True, AttentionMode.VANILLA_SELF),
        ("c", True, AttentionMode.GEO_SELF),
        ("d", True, AttentionMode.VGAM_FULL),
    ])
    def test_presets(self, key, use_omp, mode):
        cfg = pipeline.apply_ablation(PipelineConfig(), key)
        assert (cfg.use_omp, cfg.attention_mode) == (use_omp, mode)
        assert pipeline.ablation_label(cfg).startswith(f"({key})")

    def test_unknown_row(self):
        with pytest.raises(ConfigError):
            pipeline.apply_ablation(PipelineConfig(), "e")

    def test_label_outside_presets(self):
        cfg = PipelineConfig(use_omp=False, attention_mode=AttentionMode.VGAM_FULL)
        assert pipeline.ablation_label(cfg) == "w/o OMP + vgam_full"


# ── Construction ────────────────────────────────────────────────────────

class TestConstruction:

    def test_default_weights_match_encoder(self):
        instance = pipeline.RegistrationPipeline()
        assert instance.omp_source is instance.omp_target
        assert instance.vgam_weights.dims()[0] == instance.cfg.encoder.super_dim

    def test_missing_weight_file(self, tmp_path):
        cfg = PipelineConfig(omp=OmpConfig(weights_path=str(tmp_path / "missing.bin")))
        with pytest.raises(StorageError):
            pipeline.RegistrationPipeline(cfg)


# ── Registration ────────────────────────────────────────────────────────

@pytest.mark.slow
class TestRegistration:

    def test_identical_clouds_register_to_identity(self, cloud):
        result = pipeline.register_pair(cloud, cloud, cfg=unmasked_config(), gt=core.identity())
        assert result.metrics is not None
        assert result.metrics.rre < 1.0
        assert result.metrics.rte < 0.1
        assert result.metrics.success
        assert result.dense_correspondences > 0
        assert result.masks.source_fraction == 1.0
        assert set(result.timings_ms) >= {"encode", "overlap_mask", "superpoint_matching", "dense_matching", "estimate"}

    def test_grid_aligned_translation(self, cloud):
        gt = RigidTransform(rotation=np.eye(3), translation=[4.0, -6.0, 2.0])
        target = core.apply_transform(gt, cloud)
        result = pipeline.register_pair(cloud, target, cfg=unmasked_config(), gt=gt)
        assert result.metrics.rre < 1.0
        assert result.metrics.rte < 0.1

    def test_no_metrics_without_gt(self, cloud):
        result = pipeline.register_pair(cloud, cloud, cfg=unmasked_config())
        assert result.metrics is None

    def test_salient_selection(self, cloud):
        salient = encode.encode_point_pyramid(cloud, EncoderConfig()).salient
        result = pipeline.register_pair(cloud, cloud, cfg=unmasked_config(salient_only=True), gt=core.identity())
        assert result.flags == []
        assert result.masks.source_kept == result.masks.target_kept == salient.sum()
        assert result.masks.source_fraction < 1.0

    def test_flat_cloud_has_no_salient_superpoints(self, rng):
        points = rng.uniform(0.0, 16.0, size=(3000, 3))
        points[:, 2] = 0.0
        flat = PointCloud(points=points)
        result = pipeline.register_pair(flat, flat, cfg=unmasked_config(salient_only=True))
        assert result.flags == ["no salient superpoints"]
        assert result.masks.source_fraction == 1.0

    def test_missing_image_is_flagged(self, cloud):
        result = pipeline.register_pair(cloud, cloud, cfg=PipelineConfig(attention_mode=AttentionMode.GEO_SELF))
        assert "missing image" in result.flags
        assert result.masks.fallback == "missing image"

    def test_undecided_mask_falls_back(self, rng, cloud):
        image = ViewImage(pixels=rng.uniform(size=(16, 16)))
        result = pipeline.register_pair(cloud, cloud, img=image, cfg=PipelineConfig(salient_only=False))
        assert "empty overlap region" in result.flags
        assert result.masks.source_fraction == 1.0

    def test_undecided_mask_falls_back_to_salient(self, rng, cloud):
        image = ViewImage(pixels=rng.uniform(size=(16, 16)))
        salient = encode.encode_point_pyramid(cloud, EncoderConfig()).salient
        result = pipeline.register_pair(cloud, cloud, img=image, cfg=PipelineConfig())
        assert result.flags == ["empty overlap region"]
        assert result.masks.source_kept == salient.sum()

    def test_ground_truth_masks(self, cloud):
        cfg = PipelineConfig(attention_mode=AttentionMode.GEO_SELF, salient_only=False,
                             omp=OmpConfig(mask_source=MaskSource.GROUND_TRUTH))
        result = pipeline.register_pair(cloud, cloud, cfg=cfg, gt=core.identity())
        assert result.flags == []
        assert result.masks.source_fraction == 1.0

    def test_ground_truth_masks_without_gt(self, cloud):
        cfg = PipelineConfig(attention_mode=AttentionMode.GEO_SELF, omp=OmpConfig(mask_source=MaskSource.GROUND_TRUTH))
        result = pipeline.register_pair(cloud, cloud, cfg=cfg)
        assert result.flags == ["missing gt"]


class TestStageErrors:

    def test_encode_failure_names_stage(self):
        tiny = PointCloud(points=np.zeros((5, 3)))
        with pytest.raises(StageError) as info:
            pipeline.register_pair(tiny, tiny, cfg=unmasked_config())
        assert info.value.stage == "encode"
        assert isinstance(info.value.cause, EncodingError)
        assert "stage 'encode' failed" in str(info.value)
