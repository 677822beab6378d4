"""
Registration Pipeline

Runs one pair through the four phases:

1. feature extraction (point pyramids, image grid)
2. overlap masks (predicted from the image, or ground truth as an oracle)
3. superpoint enhancement and coarse matching (C')
4. grouped dense matching (C*) and pose estimation

Matching and estimation are separate calls so an estimator sweep reuses
the same correspondences. Every stage is timed, and failures are re-raised
as StageError carrying the stage name.
"""

import logging
import time
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from errors import ConfigError, CrossRegError, EmptyOverlapError, StageError
from models import (
    ArrayModel,
    AttentionMode,
    CorrespondenceSet,
    EstimatorConfig,
    FeatureLevel,
    FeaturePyramid,
    MaskedSuperpoints,
    MaskSource,
    MaskStats,
    OverlapMask,
    PipelineConfig,
    PointCloud,
    PoseEstimate,
    RegistrationResult,
    RigidTransform,
    ViewImage,
)
from stages import core, encode, estimators, omp, vgam
from stages.densematch import match_dense

logger = logging.getLogger(__name__)

ABLATION_PRESETS = {
    "a": (False, AttentionMode.GEO_SELF),
    "b": (True, AttentionMode.VANILLA_SELF),
    "c": (True, AttentionMode.GEO_SELF),
    "d": (True, AttentionMode.VGAM_FULL),
}

_ABLATION_NAMES = {
    "a": "(a) Geo self-attention w/o OMP",
    "b": "(b) OMP w/ vanilla self-attention",
    "c": "(c) OMP w/ geo self-attention",
    "d": "(d) OMP w/ VGAM(full)",
}


class MatchOutcome(ArrayModel):
    """
    Estimator-independent part of a registration.

    Attributes:
        source_dense / target_dense: Dense clouds the correspondences index
        c_super: Superpoint correspondences C'
        groups: Dense correspondences per superpoint correspondence
        c_dense: Aggregated dense correspondences C*
        masks: Overlap mask statistics
        timings_ms: Stage timings so far
        flags: Fallbacks taken
    """
    source_dense: PointCloud
    target_dense: PointCloud
    c_super: CorrespondenceSet
    groups: List[CorrespondenceSet]
    c_dense: CorrespondenceSet
    masks: MaskStats
    timings_ms: Dict[str, float]
    flags: List[str]


def ablation_label(cfg: PipelineConfig) -> str:
    """Name of the ablation row a configuration corresponds to."""
    for key, preset in ABLATION_PRESETS.items():
        if (cfg.use_omp, cfg.attention_mode) == preset:
            return _ABLATION_NAMES[key]
    return f"{'OMP' if cfg.use_omp else 'w/o OMP'} + {cfg.attention_mode.value}"


def apply_ablation(cfg: PipelineConfig, key: str) -> PipelineConfig:
    """Copy of `cfg` switched to ablation row `key` ('a' to 'd')."""
    if key not in ABLATION_PRESETS:
        raise ConfigError(f"unknown ablation row '{key}', expected one of {sorted(ABLATION_PRESETS)}")
    use_omp, mode = ABLATION_PRESETS[key]
    return cfg.model_copy(update={"use_omp": use_omp, "attention_mode": mode})


@contextmanager
def _stage(name: str, timings: Dict[str, float]) -> Iterator[None]:
    start = time.perf_counter()
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e)
    finally:
        timings[name] = (time.perf_counter() - start) * 1000.0


class RegistrationPipeline:
    """
    Configured pipeline with resolved attention weights.

    Weights are loaded once and shared read-only, so one instance can serve
    concurrent pairs.
    """

    def __init__(self, cfg: Optional[PipelineConfig] = None):
        self.cfg = cfg or PipelineConfig()
        enc = self.cfg.encoder
        try:
            self.omp_source, self.omp_target = omp.resolve_omp_weights(self.cfg.omp, enc.image_dim, enc.super_dim)
            if self.cfg.vgam.weights_path:
                self.vgam_weights = vgam.load_vgam_weights(self.cfg.vgam.weights_path)
            else:
                self.vgam_weights = vgam.weights_from_config(enc.super_dim, enc.image_dim, self.cfg.vgam)
        except CrossRegError:
            raise
        except Exception as e:
            raise ConfigError(f"Failed to prepare weights: {str(e)}")
        self._check_weight_dims()

    def _check_weight_dims(self) -> None:
        enc = self.cfg.encoder
        for branch, weights in (("source", self.omp_source), ("target", self.omp_target)):
            image_dim, super_dim, _, _ = weights.dims()
            if (image_dim, super_dim) != (enc.image_dim, enc.super_dim):
                raise ConfigError(
                    f"{branch} OMP weights expect dims ({image_dim}, {super_dim}), "
                    f"encoder produces ({enc.image_dim}, {enc.super_dim})"
                )
        expected = (enc.super_dim, enc.image_dim, self.cfg.vgam.pos_dim, self.cfg.vgam.dist_dim)
        if self.vgam_weights.dims() != expected:
            raise ConfigError(f"VGAM weights have dims {self.vgam_weights.dims()}, expected {expected}")

    def _masks(
        self,
        supers: Tuple[FeatureLevel, FeatureLevel],
        image_grid,
        gt: Optional[RigidTransform],
        flags: List[str],
    ) -> Tuple[Optional[OverlapMask], Optional[OverlapMask]]:
        cfg = self.cfg
        if not cfg.use_omp:
            return None, None
        if cfg.omp.mask_source == MaskSource.GROUND_TRUTH:
            if gt is None:
                logger.warning("Ground-truth masks requested without a ground-truth transform; matching unmasked")
                flags.append("missing gt")
                return None, None
            return omp.gt_overlap_mask(supers[0].cloud, supers[1].cloud, gt, cfg.omp.gt_radius)
        if image_grid is None:
            logger.warning("Overlap masks enabled but no image supplied; matching unmasked")
            flags.append("missing image")
            return None, None
        _, mask_src = omp.predict_mask(image_grid, supers[0].features, self.omp_source, cfg.omp.threshold)
        _, mask_tgt = omp.predict_mask(image_grid, supers[1].features, self.omp_target, cfg.omp.threshold)
        return mask_src, mask_tgt

    def _select(
        self,
        pyramids: Tuple[FeaturePyramid, FeaturePyramid],
        region: Tuple[Optional[OverlapMask], Optional[OverlapMask]],
        flags: List[str],
    ) -> Tuple[MaskedSuperpoints, MaskedSuperpoints]:
        # Narrowest non-empty choice wins: overlap and salient, overlap alone, salient alone, everything
        supers = [pyramid.superpoints for pyramid in pyramids]
        overlap = [np.ones(len(level.cloud), dtype=bool) if mask is None else mask.values for level, mask in zip(supers, region)]
        salient = [
            pyramid.salient if self.cfg.salient_only and pyramid.salient is not None else np.ones(len(level.cloud), dtype=bool)
            for pyramid, level in zip(pyramids, supers)
        ]
        candidates = [
            (None, [o & s for o, s in zip(overlap, salient)]),
            ("no salient superpoints", overlap),
            ("empty overlap region", salient),
            ("empty overlap region", [np.ones(len(level.cloud), dtype=bool) for level in supers]),
        ]
        for flag, values in candidates:
            try:
                subsets = tuple(vgam.select_overlap_subset(level, OverlapMask(values=v)) for level, v in zip(supers, values))
            except EmptyOverlapError:
                continue
            if flag is not None:
                logger.warning(f"Superpoint selection fell back: {flag}")
                flags.append(flag)
            return subsets
        raise EmptyOverlapError("empty overlap region")

    def match_pair(
        self,
        src: PointCloud,
        tgt: PointCloud,
        img: Optional[ViewImage] = None,
        gt: Optional[RigidTransform] = None,
    ) -> MatchOutcome:
        """
        Run everything up to and including dense matching.

        Args:
            src: Source cloud
            tgt: Target cloud
            img: Optional unaligned view image
            gt: Ground truth; only needed for ground-truth masks

        Returns:
            MatchOutcome: Correspondences and diagnostics

        Raises:
            StageError: Wrapping the failure of any stage
        """
        cfg = self.cfg
        timings: Dict[str, float] = {}
        flags: List[str] = []

        with _stage("encode", timings):
            pyramid_src = encode.encode_point_pyramid(src, cfg.encoder)
            pyramid_tgt = encode.encode_point_pyramid(tgt, cfg.encoder)
        supers = (pyramid_src.superpoints, pyramid_tgt.superpoints)

        image_grid = None
        needs_image = (cfg.use_omp and cfg.omp.mask_source == MaskSource.PREDICTED) or \
            cfg.attention_mode == AttentionMode.VGAM_FULL
        if img is not None and needs_image:
            with _stage("encode_image", timings):
                image_grid = encode.encode_image(img, cfg.encoder)

        with _stage("overlap_mask", timings):
            region = self._masks(supers, image_grid, gt, flags)
            subset_src, subset_tgt = self._select((pyramid_src, pyramid_tgt), region, flags)
            masks = MaskStats(
                source_fraction=len(subset_src) / len(supers[0].cloud),
                target_fraction=len(subset_tgt) / len(supers[1].cloud),
                source_kept=len(subset_src),
                target_kept=len(subset_tgt),
                fallback=flags[-1] if flags else None,
            )

        with _stage("superpoint_matching", timings):
            pixels = coords = None
            if image_grid is not None:
                pixels, coords = image_grid.flattened()
            enhanced_src = encode.normalize_rows(
                vgam.enhance(subset_src, self.vgam_weights, cfg.vgam, cfg.attention_mode, pixels, coords))
            enhanced_tgt = encode.normalize_rows(
                vgam.enhance(subset_tgt, self.vgam_weights, cfg.vgam, cfg.attention_mode, pixels, coords))
            z = vgam.dual_normalize(vgam.similarity_matrix(enhanced_src, enhanced_tgt))
            k = cfg.vgam.top_k or vgam.default_k(len(subset_src), len(subset_tgt), cfg.vgam.top_k_cap)
            c_super = vgam.topk_correspondences(
                z, k, subset_src.index_map, subset_tgt.index_map, mutual_rank=cfg.vgam.mutual_rank)

        with _stage("dense_matching", timings):
            groups, c_dense = match_dense(
                c_super, pyramid_src.dense, pyramid_tgt.dense, supers[0], supers[1], cfg.match)

        logger.info(
            f"Matched {len(c_super)} superpoint and {len(c_dense)} dense correspondences "
            f"(masks {masks.source_kept}/{len(supers[0].cloud)}, {masks.target_kept}/{len(supers[1].cloud)})"
        )
        return MatchOutcome(
            source_dense=pyramid_src.dense.cloud,
            target_dense=pyramid_tgt.dense.cloud,
            c_super=c_super,
            groups=groups,
            c_dense=c_dense,
            masks=masks,
            timings_ms=timings,
            flags=flags,
        )

    def estimate_pose(self, outcome: MatchOutcome, est_cfg: Optional[EstimatorConfig] = None) -> Tuple[PoseEstimate, float]:
        """
        Estimate the pose from a match outcome.

        Returns:
            Tuple of (pose, elapsed milliseconds)
        """
        timings: Dict[str, float] = {}
        with _stage("estimate", timings):
            pose = estimators.estimate(
                outcome.c_super, outcome.groups, outcome.source_dense, outcome.target_dense,
                est_cfg or self.cfg.estimator,
            )
        return pose, timings["estimate"]

    def result(
        self,
        outcome: MatchOutcome,
        pose: PoseEstimate,
        estimate_ms: float,
        gt: Optional[RigidTransform] = None,
    ) -> RegistrationResult:
        """Assemble a RegistrationResult; metrics only when `gt` is given."""
        metrics = None
        if gt is not None:
            metrics = core.evaluate_registration(
                pose.transform, gt, outcome.c_dense, outcome.source_dense, outcome.target_dense,
                self.cfg.rre_threshold, self.cfg.rte_threshold, self.cfg.ir_threshold,
            )
        return RegistrationResult(
            pose=pose,
            superpoint_correspondences=len(outcome.c_super),
            dense_correspondences=len(outcome.c_dense),
            masks=outcome.masks,
            metrics=metrics,
            timings_ms={**outcome.timings_ms, "estimate": estimate_ms},
            flags=list(outcome.flags),
        )

    def register(
        self,
        src: PointCloud,
        tgt: PointCloud,
        img: Optional[ViewImage] = None,
        gt: Optional[RigidTransform] = None,
    ) -> RegistrationResult:
        outcome = self.match_pair(src, tgt, img, gt)
        pose, elapsed = self.estimate_pose(outcome)
        return self.result(outcome, pose, elapsed, gt)


def register_pair(
    src: PointCloud,
    tgt: PointCloud,
    img: Optional[ViewImage] = None,
    cfg: Optional[PipelineConfig] = None,
    gt: Optional[RigidTransform] = None,
) -> RegistrationResult:
    """
    Register one pair with a fresh pipeline.

    Args:
        src: Source cloud
        tgt: Target cloud
        img: Optional unaligned view image
        cfg: Pipeline configuration, defaults when omitted
        gt: Optional ground truth for metrics (and ground-truth masks)

    Returns:
        RegistrationResult: Pose, correspondence counts, masks, metrics, timings
    """
    return RegistrationPipeline(cfg).register(src, tgt, img, gt)
