"""
Overlap Mask Predictor

Fuses image features into superpoint features with multi-head cross
attention and predicts, per superpoint, the probability of lying in the
region seen by both scans:

    F_fuse = MultiHeadAttn(F^Q, F_I)
    P      = sigmoid(MLP(F_fuse + FFN(F_fuse + F^Q)))
    M      = P > lambda

The ground-truth mask generator used for supervision and for the
GT-informed ablation lives here as well.
"""

import logging
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit

from errors import AttentionError
from models import (
    ImageFeatureGrid,
    OmpConfig,
    OmpWeights,
    OverlapMask,
    OverlapProbabilities,
    PointCloud,
    RigidTransform,
)
from stages import core, fileio
from stages.attention import check_dims, gelu, layer_norm, multi_head_attention

logger = logging.getLogger(__name__)

WEIGHTS_MAGIC = b"OMPW"

# Probabilities stay strictly inside (0, 1)
_PROBABILITY_FLOOR = 1e-15


def default_omp_weights(
    image_dim: int,
    super_dim: int,
    unified_dim: int = 64,
    heads: int = 4,
    mlp_hidden: int = 32,
) -> OmpWeights:
    """
    Untrained weights: identity-block projections and attention, a small
    identity-block FFN and a zero MLP head, so every probability is 0.5.
    """
    shapes = OmpWeights.shapes(image_dim, super_dim, unified_dim, mlp_hidden)
    arrays = {name: np.zeros(shape) for name, shape in shapes.items()}
    arrays["img_proj"] = np.eye(image_dim, unified_dim)
    arrays["sup_proj"] = np.eye(super_dim, unified_dim)
    for name in ("wq", "wk", "wv", "wo"):
        arrays[name] = np.eye(unified_dim)
    arrays["ln_gamma"] = np.ones(unified_dim)
    arrays["ffn_w1"] = 0.5 * np.eye(unified_dim, 2 * unified_dim)
    arrays["ffn_w2"] = 0.5 * np.eye(2 * unified_dim, unified_dim)
    return OmpWeights(heads=heads, **arrays)


def align_features(
    f_img: ImageFeatureGrid,
    f_super: np.ndarray,
    w: OmpWeights,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Project image and superpoint features into the unified space.

    Returns:
        Tuple of (aligned pixel features (H*W, u), aligned superpoint features (n, u))

    Raises:
        AttentionError: If the input dims do not match the weights
    """
    pixels, _ = f_img.flattened()
    check_dims("image features", pixels, w.img_proj.shape[0])
    check_dims("superpoint features", f_super, w.sup_proj.shape[0])
    return pixels @ w.img_proj + w.img_bias, f_super @ w.sup_proj + w.sup_bias


def fuse(
    aligned_super: np.ndarray,
    aligned_img: np.ndarray,
    w: OmpWeights,
    return_weights: bool = False,
):
    """
    Cross-modal fusion: superpoints attend to image pixels.

    Returns:
        F_fuse (n, u), plus the (heads, n, pixels) attention weights when
        `return_weights` is set
    """
    fused, weights = multi_head_attention(aligned_super, aligned_img, w.wq, w.wk, w.wv, w.wo, w.heads)
    return (fused, weights) if return_weights else fused


def predict_overlap_prob(f_fuse: np.ndarray, aligned_super: np.ndarray, w: OmpWeights) -> OverlapProbabilities:
    """
    Overlap probability head.

    The residual sum F_fuse + F^Q goes through the layer-normalized FFN, F_fuse
    is added back, and the MLP maps each row to one logit.
    """
    if f_fuse.shape != aligned_super.shape:
        raise AttentionError(f"fused/aligned shapes differ: {f_fuse.shape} vs {aligned_super.shape}")
    check_dims("fused features", f_fuse, w.ffn_w1.shape[0])

    inner = f_fuse + aligned_super
    hidden = gelu(layer_norm(inner, w.ln_gamma, w.ln_beta) @ w.ffn_w1 + w.ffn_b1)
    ffn = hidden @ w.ffn_w2 + w.ffn_b2
    head_input = f_fuse + ffn
    logits = np.maximum(head_input @ w.mlp_w1 + w.mlp_b1, 0.0) @ w.mlp_w2 + w.mlp_b2[0]
    probabilities = np.clip(expit(logits), _PROBABILITY_FLOOR, 1.0 - _PROBABILITY_FLOOR)
    return OverlapProbabilities(values=probabilities)


def threshold_mask(p: OverlapProbabilities, threshold: float = 0.5) -> OverlapMask:
    """1 where the probability is strictly greater than the threshold."""
    if not 0.0 < threshold < 1.0:
        raise AttentionError(f"threshold must lie in (0, 1), got {threshold}")
    return OverlapMask(values=p.values > threshold)


def gt_overlap_mask(
    supers_src: PointCloud,
    supers_tgt: PointCloud,
    gt: RigidTransform,
    radius: float = 0.5,
) -> Tuple[OverlapMask, OverlapMask]:
    """
    Ground-truth overlap masks.

    A source superpoint is 1 iff its gt-transformed position has a target
    superpoint within `radius`; a target superpoint is 1 iff some transformed
    source superpoint lies within `radius` of it.

    Raises:
        GeometryError: If either cloud is empty
    """
    if radius <= 0:
        raise AttentionError(f"radius must be > 0, got {radius}")
    moved = core.apply_transform(gt, supers_src)
    mask_src = core.KdIndex(supers_tgt).within(moved.points, radius)
    mask_tgt = core.KdIndex(moved).within(supers_tgt.points, radius)
    return OverlapMask(values=mask_src), OverlapMask(values=mask_tgt)


def predict_mask(
    f_img: ImageFeatureGrid,
    f_super: np.ndarray,
    w: OmpWeights,
    threshold: float,
) -> Tuple[OverlapProbabilities, OverlapMask]:
    """Run the full predictor for one cloud."""
    aligned_img, aligned_super = align_features(f_img, f_super, w)
    probabilities = predict_overlap_prob(fuse(aligned_super, aligned_img, w), aligned_super, w)
    mask = threshold_mask(probabilities, threshold)
    logger.debug(f"Predicted overlap mask keeps {int(mask.values.sum())}/{len(mask)} superpoints")
    return probabilities, mask


def save_omp_weights(path: str, w: OmpWeights) -> None:
    dims = (*w.dims(), w.heads)
    fileio.write_weight_container(path, WEIGHTS_MAGIC, dims, [getattr(w, name) for name in OmpWeights.ARRAY_ORDER])


def load_omp_weights(path: str) -> OmpWeights:
    """
    Read an OMPW container.

    Raises:
        FormatError: On a bad header, truncated payload or inconsistent shapes
    """
    dims = fileio.read_weight_header(path, WEIGHTS_MAGIC)
    if len(dims) != 5:
        fileio.raise_format(path, 8, f"expected 5 dims, got {len(dims)}")
    image_dim, super_dim, unified, hidden, heads = dims
    shapes = OmpWeights.shapes(image_dim, super_dim, unified, hidden)
    arrays = fileio.read_weight_container(path, WEIGHTS_MAGIC, [shapes[name] for name in OmpWeights.ARRAY_ORDER])
    try:
        return OmpWeights(heads=heads, **dict(zip(OmpWeights.ARRAY_ORDER, arrays)))
    except ValueError as e:
        fileio.raise_format(path, 0, f"invalid weights: {e}")


def resolve_omp_weights(
    cfg: OmpConfig,
    image_dim: int,
    super_dim: int,
) -> Tuple[OmpWeights, OmpWeights]:
    """
    Weights for the (source, target) branches: loaded when paths are
    configured, defaults otherwise. With shared weights both branches use the
    source weights.
    """
    if cfg.weights_path:
        source = load_omp_weights(cfg.weights_path)
    else:
        source = default_omp_weights(image_dim, super_dim, cfg.unified_dim, cfg.heads, cfg.mlp_hidden)
    if cfg.share_weights:
        return source, source
    target: Optional[OmpWeights] = load_omp_weights(cfg.target_weights_path) if cfg.target_weights_path else None
    if target is None:
        logger.warning("Separate target OMP weights requested without a path; using default weights")
        target = default_omp_weights(image_dim, super_dim, cfg.unified_dim, cfg.heads, cfg.mlp_hidden)
    return source, target
