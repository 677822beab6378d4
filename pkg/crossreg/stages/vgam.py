"""
Visual-Geometric Attention Guided Matching

Enhances the features of the superpoints inside the predicted overlap
region and turns them into superpoint correspondences:

1. visual cross attention against the flattened image features, with
   positional embeddings on both sides;
2. self attention among the selected superpoints;
3. geometric self attention whose logits carry an embedding of pairwise
   superpoint distances;
4. similarity exp(-||F_i - F_j||^2), dual normalization, global top-K,
   optionally restricted to entries ranked high in both their row and column.

All stages are single-head and residual.
"""

import logging
from typing import List, Optional

import numpy as np
from scipy.special import softmax

from errors import AttentionError, EmptyOverlapError
from models import (
    AttentionMode,
    CorrespondenceSet,
    FeatureLevel,
    Granularity,
    MaskedSuperpoints,
    OverlapMask,
    VgamConfig,
    VgamWeights,
)
from stages import fileio
from stages.attention import attention, check_dims
from stages.encode import positional_encoding

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"VGAW"


def locality_weights(dist_dim: int, locality_radius: float, max_period: float = 200.0) -> np.ndarray:
    """
    Distance projection giving a Gaussian-like falloff of width `locality_radius`.

    Only the cosine column of the longest period is used: beta * cos(2 pi r / P)
    is beta - r^2 / (2 locality_radius^2) up to fourth order for r well below P / 4.
    """
    w_dist = np.zeros(dist_dim)
    w_dist[-1] = max_period ** 2 / (4.0 * np.pi ** 2 * locality_radius ** 2)
    return w_dist


def default_vgam_weights(
    feat_dim: int,
    image_dim: int,
    pos_dim: int = 64,
    dist_dim: int = 16,
    value_scale: float = 0.1,
    geo_value_scale: Optional[float] = None,
    locality_radius: Optional[float] = None,
    max_period: float = 200.0,
) -> VgamWeights:
    """
    Untrained weights: identity queries and keys, scaled-identity values and
    zero positional projections.

    The geometric stage uses `geo_value_scale` (default `value_scale`) and,
    with a `locality_radius`, a distance projection that focuses it on
    nearby superpoints; without one its distance projection is zero.
    """
    identity = np.eye(feat_dim)
    geo_scale = value_scale if geo_value_scale is None else geo_value_scale
    w_dist = np.zeros(dist_dim) if locality_radius is None else locality_weights(dist_dim, locality_radius, max_period)
    return VgamWeights(
        wq_c=identity,
        wk_c=np.eye(image_dim, feat_dim),
        wv_c=value_scale * np.eye(image_dim, feat_dim),
        we_c=np.zeros((pos_dim, feat_dim)),
        wg_c=np.zeros((pos_dim, feat_dim)),
        wq_s=identity,
        wk_s=identity,
        wv_s=value_scale * identity,
        wq_g=identity,
        wk_g=identity,
        wv_g=geo_scale * identity,
        w_dist=w_dist,
    )


def weights_from_config(feat_dim: int, image_dim: int, cfg: VgamConfig) -> VgamWeights:
    """Untrained weights with the dimensions and scales of a configuration."""
    return default_vgam_weights(
        feat_dim,
        image_dim,
        pos_dim=cfg.pos_dim,
        dist_dim=cfg.dist_dim,
        value_scale=cfg.value_scale,
        geo_value_scale=cfg.geo_value_scale,
        locality_radius=cfg.locality_radius,
        max_period=cfg.max_period,
    )


def select_overlap_subset(level: FeatureLevel, mask: OverlapMask) -> MaskedSuperpoints:
    """
    Keep the superpoints whose mask bit is set, in their original order.

    Raises:
        AttentionError: If the mask length differs from the superpoint count
        EmptyOverlapError: "empty overlap region" for an all-zero mask
    """
    if len(mask) != len(level.cloud):
        raise AttentionError(f"mask length {len(mask)} != superpoint count {len(level.cloud)}")
    index_map = np.flatnonzero(mask.values)
    if index_map.size == 0:
        raise EmptyOverlapError("empty overlap region")
    return MaskedSuperpoints(
        points=level.cloud.points[index_map],
        features=level.features[index_map],
        index_map=index_map,
    )


def visual_cross_attention(
    features: np.ndarray,
    image_features: np.ndarray,
    pos_q: np.ndarray,
    pos_i: np.ndarray,
    w: VgamWeights,
) -> np.ndarray:
    """
    F' = softmax((Q_c + E_c)(K_c + G_c)^T / sqrt(d)) (V_c + G_c) + F.

    Q_c comes from the superpoint features, K_c and V_c from the flattened
    image features, E_c and G_c from the superpoint and pixel positional
    encodings.
    """
    feat_dim, image_dim, pos_dim, _ = w.dims()
    check_dims("superpoint features", features, feat_dim)
    check_dims("image features", image_features, image_dim)
    check_dims("superpoint positions", pos_q, pos_dim)
    check_dims("pixel positions", pos_i, pos_dim)
    if pos_q.shape[0] != features.shape[0] or pos_i.shape[0] != image_features.shape[0]:
        raise AttentionError("one positional encoding row per feature row required")

    g = pos_i @ w.wg_c
    queries = features @ w.wq_c + pos_q @ w.we_c
    keys = image_features @ w.wk_c + g
    values = image_features @ w.wv_c + g
    out, _ = attention(queries, keys, values, scale_dim=feat_dim)
    return out + features


def self_attention(features: np.ndarray, w: VgamWeights) -> np.ndarray:
    """F'' = softmax(Q_s K_s^T / sqrt(d)) V_s + F'."""
    check_dims("features", features, w.wq_s.shape[0])
    out, _ = attention(features @ w.wq_s, features @ w.wk_s, features @ w.wv_s)
    return out + features


def distance_bias(
    positions: np.ndarray,
    w: VgamWeights,
    min_period: float = 0.5,
    max_period: float = 200.0,
) -> np.ndarray:
    """(m, m) logit bias: sinusoidal encoding of pairwise distances projected by w_dist."""
    distances = np.linalg.norm(positions[:, None, :] - positions[None, :, :], axis=2)
    encoded = positional_encoding(distances.reshape(-1, 1), w.w_dist.shape[0], min_period, max_period)
    return (encoded @ w.w_dist).reshape(distances.shape)


def geometric_self_attention(
    features: np.ndarray,
    positions: np.ndarray,
    w: VgamWeights,
    min_period: float = 0.5,
    max_period: float = 200.0,
) -> np.ndarray:
    """Self attention with a pairwise-distance logit bias; depends on positions only through distances."""
    check_dims("features", features, w.wq_g.shape[0])
    if positions.shape != (features.shape[0], 3):
        raise AttentionError(f"expected ({features.shape[0]}, 3) positions, got {positions.shape}")
    bias = distance_bias(positions, w, min_period, max_period)
    out, _ = attention(features @ w.wq_g, features @ w.wk_g, features @ w.wv_g, bias=bias)
    return out + features


def stage_sequence(mode: AttentionMode, with_image: bool) -> List[str]:
    """Attention stages applied per repeat for an ablation mode."""
    if mode == AttentionMode.VANILLA_SELF:
        return ["self"]
    if mode == AttentionMode.GEO_SELF:
        return ["geometric"]
    return (["visual"] if with_image else []) + ["self", "geometric"]


def enhance(
    subset: MaskedSuperpoints,
    w: VgamWeights,
    cfg: VgamConfig,
    mode: AttentionMode = AttentionMode.VGAM_FULL,
    image_features: Optional[np.ndarray] = None,
    pixel_coords: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Apply the stage sequence of `mode` `cfg.repeats` times.

    Args:
        subset: Selected superpoints
        w: Stage weights
        cfg: Enhancement settings
        mode: Ablation mode
        image_features: Flattened (pixels, d) image features; the visual
            stage is skipped without them
        pixel_coords: (pixels, 2) pixel coordinates

    Returns:
        np.ndarray: Enhanced (m, d) features
    """
    with_image = image_features is not None and pixel_coords is not None
    stages = stage_sequence(mode, with_image)
    features = subset.features
    pos_q = pos_i = None
    if "visual" in stages:
        pos_q = positional_encoding(subset.points, cfg.pos_dim, cfg.min_period, cfg.max_period)
        pos_i = positional_encoding(pixel_coords, cfg.pos_dim, cfg.min_period, cfg.max_period)

    for _ in range(cfg.repeats):
        for stage in stages:
            if stage == "visual":
                features = visual_cross_attention(features, image_features, pos_q, pos_i, w)
            elif stage == "self":
                features = self_attention(features, w)
            else:
                features = geometric_self_attention(features, subset.points, w, cfg.min_period, cfg.max_period)
    return features


def similarity_matrix(f_src: np.ndarray, f_tgt: np.ndarray) -> np.ndarray:
    """Z'_ij = exp(-||F_i - F_j||^2), entries in (0, 1]."""
    if f_src.shape[1] != f_tgt.shape[1]:
        raise AttentionError(f"feature dims differ: {f_src.shape[1]} vs {f_tgt.shape[1]}")
    squared = (
        np.sum(f_src ** 2, axis=1)[:, None]
        + np.sum(f_tgt ** 2, axis=1)[None, :]
        - 2.0 * f_src @ f_tgt.T
    )
    return np.exp(-np.maximum(squared, 0.0))


def dual_normalize(z: np.ndarray) -> np.ndarray:
    """Elementwise product of the row-wise and column-wise softmax."""
    if z.size == 0:
        raise AttentionError("cannot normalize an empty similarity matrix")
    return softmax(z, axis=1) * softmax(z, axis=0)


def default_k(n_src: int, n_tgt: int, cap: int = 256) -> int:
    """min(cap, n_src * n_tgt / 4), at least 1."""
    return max(1, min(cap, (n_src * n_tgt) // 4))


def mutual_rank_mask(z_norm: np.ndarray, rank: int) -> np.ndarray:
    """Entries among the `rank` largest of both their row and their column; ties resolve by index."""
    row_rank = np.argsort(np.argsort(-z_norm, axis=1, kind="stable"), axis=1, kind="stable")
    col_rank = np.argsort(np.argsort(-z_norm, axis=0, kind="stable"), axis=0, kind="stable")
    return (row_rank < rank) & (col_rank < rank)


def topk_correspondences(
    z_norm: np.ndarray,
    k: int,
    src_map: np.ndarray,
    tgt_map: np.ndarray,
    mutual_rank: Optional[int] = None,
) -> CorrespondenceSet:
    """
    The k largest entries, mapped back to original superpoint indices.

    With `mutual_rank`, only entries passing `mutual_rank_mask` compete and
    fewer than k pairs come back when fewer qualify. Ties resolve in
    (row, col) order.
    """
    if k < 1:
        raise AttentionError(f"k must be >= 1, got {k}")
    flat = z_norm.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    if mutual_rank is not None:
        order = order[mutual_rank_mask(z_norm, mutual_rank).reshape(-1)[order]]
    order = order[:k]
    rows, cols = np.divmod(order, z_norm.shape[1])
    pairs = np.stack([src_map[rows], tgt_map[cols]], axis=1)
    return CorrespondenceSet(pairs=pairs, confidence=flat[order], granularity=Granularity.SUPERPOINT)


def save_vgam_weights(path: str, w: VgamWeights) -> None:
    fileio.write_weight_container(path, WEIGHTS_MAGIC, w.dims(), [getattr(w, name) for name in VgamWeights.ARRAY_ORDER])


def load_vgam_weights(path: str) -> VgamWeights:
    """
    Read a VGAW container.

    Raises:
        FormatError: On a bad header, truncated payload or inconsistent shapes
    """
    dims = fileio.read_weight_header(path, WEIGHTS_MAGIC)
    if len(dims) != 4:
        fileio.raise_format(path, 8, f"expected 4 dims, got {len(dims)}")
    shapes = VgamWeights.shapes(*dims)
    arrays = fileio.read_weight_container(path, WEIGHTS_MAGIC, [shapes[name] for name in VgamWeights.ARRAY_ORDER])
    try:
        return VgamWeights(**dict(zip(VgamWeights.ARRAY_ORDER, arrays)))
    except ValueError as e:
        fileio.raise_format(path, 0, f"invalid weights: {e}")
