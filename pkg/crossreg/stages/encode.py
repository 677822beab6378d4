"""
Feature Encoding

Deterministic encoders standing in for learned backbones:

- a point feature pyramid built from local covariance eigen-features,
  verticality, height and density, pooled over successively coarser voxel
  grids (dense points at level 0, superpoints at the top), with a
  ring-by-height context histogram added to every superpoint;
- an image feature grid from box-filtered values and gradients at several
  scales;
- sinusoidal positional encodings for superpoints and pixels.

Raw descriptors are mapped to the configured dimensions through fixed,
seeded orthonormal embeddings, so cosine similarity between features equals
cosine similarity between the raw descriptors.
"""

import logging
from functools import lru_cache
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import uniform_filter
from scipy.spatial import cKDTree

from errors import EncodingError
from models import (
    EncoderConfig,
    FeatureLevel,
    FeaturePyramid,
    ImageFeatureGrid,
    PointCloud,
    ViewImage,
)
from stages import core

logger = logging.getLogger(__name__)

CHANNELS_PER_RADIUS = 6

# Centering applied to (linearity, planarity, sphericity, verticality, height, density)
NEUTRAL_DESCRIPTOR = np.array([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.5, 0.25, 0.5])

_EMBEDDING_SEED = 20240917


@lru_cache(maxsize=32)
def _embedding(in_dim: int, out_dim: int, tag: int) -> np.ndarray:
    rng = np.random.default_rng([_EMBEDDING_SEED, in_dim, out_dim, tag])
    if in_dim <= out_dim:
        q, _ = np.linalg.qr(rng.normal(size=(out_dim, in_dim)))
        matrix = q.T
    else:
        matrix, _ = np.linalg.qr(rng.normal(size=(in_dim, out_dim)))
    matrix.setflags(write=False)
    return matrix


def embed(raw: np.ndarray, out_dim: int, tag: int = 0) -> np.ndarray:
    """
    Map raw descriptors to `out_dim` with a fixed orthonormal embedding and
    L2-normalize the rows. Rows with vanishing norm become the first basis vector.
    """
    projected = raw @ _embedding(raw.shape[1], out_dim, tag)
    return normalize_rows(projected)


def normalize_rows(features: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1, keepdims=True)
    fallback = np.zeros(features.shape[1])
    fallback[0] = 1.0
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = features / norms
    return np.where(norms > 1e-12, unit, fallback)


def local_eigen_features(
    points: np.ndarray,
    radius: float,
    support: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Covariance eigen-features of the ball neighborhood of every point.

    Args:
        points: (n, 3) query points
        radius: Ball radius in meters
        support: (m, 3) neighbor candidates; defaults to `points`

    Returns:
        np.ndarray: (n, 5) columns linearity, planarity, sphericity,
            |normal . z| and neighbor count (query point included when it
            belongs to the support)
    """
    support = points if support is None else support
    tree = cKDTree(support)
    neighbors = tree.query_ball_point(points, r=radius)
    lengths = np.array([len(members) for members in neighbors], dtype=np.int64)
    owners = np.repeat(np.arange(points.shape[0]), lengths)
    flat = np.concatenate([np.asarray(m, dtype=np.int64) for m in neighbors]) if lengths.sum() else np.zeros(0, np.int64)
    return _eigen_from_pairs(points, support, owners, flat, points.shape[0])


def _eigen_from_pairs(
    points: np.ndarray,
    support: np.ndarray,
    owners: np.ndarray,
    members: np.ndarray,
    n: int,
) -> np.ndarray:
    # Offsets relative to the query point keep the sums well conditioned
    offsets = support[members] - points[owners]
    counts = np.bincount(owners, minlength=n).astype(np.float64)
    safe = np.maximum(counts, 1.0)
    mean = np.stack([np.bincount(owners, weights=offsets[:, a], minlength=n) for a in range(3)], axis=1) / safe[:, None]
    second = np.empty((n, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            value = np.bincount(owners, weights=offsets[:, a] * offsets[:, b], minlength=n) / safe
            second[:, a, b] = value
            second[:, b, a] = value
    covariance = second - mean[:, :, None] * mean[:, None, :]

    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    l3, l2, l1 = (np.maximum(eigenvalues[:, k], 0.0) for k in range(3))
    valid = (counts >= 3) & (l1 > 1e-12)
    l1_safe = np.where(valid, l1, 1.0)

    features = np.zeros((n, 5))
    features[:, 0] = np.where(valid, (l1 - l2) / l1_safe, 0.0)
    features[:, 1] = np.where(valid, (l2 - l3) / l1_safe, 0.0)
    features[:, 2] = np.where(valid, l3 / l1_safe, 0.0)
    features[:, 3] = np.where(valid, np.abs(eigenvectors[:, 2, 0]), 0.0)
    features[:, 4] = counts
    return features


def ground_level(points: np.ndarray, cfg: EncoderConfig) -> float:
    """Low percentile of the point heights, taken as the local ground."""
    return float(np.percentile(points[:, 2], cfg.ground_percentile))


def point_descriptors(points: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """
    Raw multi-radius descriptors of level-0 points.

    Per radius: linearity, planarity, sphericity, verticality, normalized
    height above the local ground estimate and log density relative to a
    planar surface sampled at the level-0 voxel size.
    """
    n = points.shape[0]
    ground = ground_level(points, cfg)
    voxel = cfg.voxel_sizes[0]

    # All neighbor pairs once at the largest radius, then filtered per radius
    tree = cKDTree(points)
    pairs = tree.query_pairs(max(cfg.descriptor_radii), output_type="ndarray")
    distances = np.linalg.norm(points[pairs[:, 0]] - points[pairs[:, 1]], axis=1)
    self_index = np.arange(n)

    columns = []
    for radius in cfg.descriptor_radii:
        close = pairs[distances <= radius]
        owners = np.concatenate([self_index, close[:, 0], close[:, 1]])
        members = np.concatenate([self_index, close[:, 1], close[:, 0]])
        eigen = _eigen_from_pairs(points, points, owners, members, n)

        neighbor_z = np.bincount(owners, weights=points[members, 2], minlength=n) / eigen[:, 4]
        height = np.clip((neighbor_z - ground) / cfg.height_scale, 0.0, 1.0)
        expected = np.pi * radius * radius / (voxel * voxel)
        density = np.clip(np.log1p(eigen[:, 4]) / np.log1p(expected), 0.0, 1.5)
        columns.append(np.column_stack([eigen[:, :4], height, density]))
    return np.hstack(columns)


def elevated_support(points: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """
    Height above ground of every level-0 point, zeroed where the point is
    isolated (fewer than three neighbors within the smallest descriptor radius).
    """
    elevation = points[:, 2] - ground_level(points, cfg)
    counts = cKDTree(points).query_ball_point(points, r=min(cfg.descriptor_radii), return_length=True)
    return np.where(counts >= 3, np.maximum(elevation, 0.0), 0.0)


def superpoint_context(
    centers: np.ndarray,
    points: np.ndarray,
    heights: np.ndarray,
    cfg: EncoderConfig,
) -> np.ndarray:
    """
    Ring-by-height histogram of the structure around every superpoint.

    Points within `context_radius` horizontally of a center are binned by
    horizontal distance into `context_rings` equal rings and by height into
    the `context_heights` bins; points below the first edge are ignored.
    Counts are log-compressed and rows L2-normalized. A center without
    structure around it keeps a zero row. Depends on the centers only
    through horizontal distances, so it is unchanged by rotations about z.

    Args:
        centers: (m, 3) superpoint positions
        points: (n, 3) structure points
        heights: (n,) height of each structure point above ground
        cfg: Encoder configuration

    Returns:
        np.ndarray: (m, context_rings * len(context_heights))
    """
    n_rings, n_levels = cfg.context_rings, len(cfg.context_heights)
    n_bins = n_rings * n_levels
    histogram = np.zeros((centers.shape[0], n_bins))
    keep = heights >= cfg.context_heights[0]
    points, heights = points[keep], heights[keep]
    if points.shape[0] == 0 or centers.shape[0] == 0:
        return histogram

    neighbors = cKDTree(points[:, :2]).query_ball_point(centers[:, :2], r=cfg.context_radius)
    lengths = np.array([len(members) for members in neighbors], dtype=np.int64)
    if lengths.sum() == 0:
        return histogram
    owners = np.repeat(np.arange(centers.shape[0]), lengths)
    flat = np.concatenate([np.asarray(m, dtype=np.int64) for m in neighbors])

    radial = np.linalg.norm(points[flat, :2] - centers[owners, :2], axis=1)
    ring = np.minimum((radial / cfg.context_radius * n_rings).astype(np.int64), n_rings - 1)
    level = np.searchsorted(np.asarray(cfg.context_heights), heights[flat], side="right") - 1
    bins = owners * n_bins + ring * n_levels + level
    histogram = np.bincount(bins, minlength=centers.shape[0] * n_bins).reshape(-1, n_bins).astype(np.float64)

    histogram = np.log1p(histogram)
    norms = np.linalg.norm(histogram, axis=1, keepdims=True)
    return np.divide(histogram, norms, out=np.zeros_like(histogram), where=norms > 0)


def _pool(features: np.ndarray, groups: np.ndarray, n_groups: int, reducer: str) -> np.ndarray:
    dim = features.shape[1]
    if reducer in ("mean", "sum"):
        sums = np.stack([np.bincount(groups, weights=features[:, k], minlength=n_groups) for k in range(dim)], axis=1)
        if reducer == "sum":
            return sums
        counts = np.bincount(groups, minlength=n_groups).astype(np.float64)
        return sums / counts[:, None]
    pooled = np.full((n_groups, dim), -np.inf)
    np.maximum.at(pooled, groups, features)
    return pooled


def pool_through_chain(values: np.ndarray, chain: List[Tuple[np.ndarray, int]], reducer: str) -> np.ndarray:
    """Pool level-0 rows up a chain of (voxel membership, voxel count) steps; `sum` and `max` compose exactly."""
    for members, size in chain:
        values = _pool(values, members, size, reducer)
    return values


def encode_point_pyramid(c: PointCloud, cfg: EncoderConfig) -> FeaturePyramid:
    """
    Build the feature pyramid of a cloud.

    Level 0 is the cloud voxelized at the first voxel size, with dense features
    of dimension `dense_dim`. Each coarser level voxelizes the previous one and
    intermediate levels mean-pool their voxel members. A superpoint carries the
    mean and max of the raw descriptors of all level-0 points below it plus the
    weighted context histogram of its surroundings, embedded into `super_dim`.

    Superpoints are marked salient when at least `min_support` level-0 points
    fall below them and one of those stands `ground_clearance` above ground
    with local support.

    Args:
        c: Input cloud
        cfg: Encoder configuration

    Returns:
        FeaturePyramid: Levels from dense points to superpoints

    Raises:
        EncodingError: "degenerate cloud" when level 0 has too few points or
            the levels stop shrinking
    """
    dense_cloud = core.voxel_downsample(c, cfg.voxel_sizes[0])
    if len(dense_cloud) < cfg.min_points:
        raise EncodingError(f"degenerate cloud: {len(dense_cloud)} points after voxelization")

    neutral = np.tile(NEUTRAL_DESCRIPTOR, len(cfg.descriptor_radii))
    raw = point_descriptors(dense_cloud.points, cfg) - neutral
    features = embed(raw, cfg.dense_dim, tag=0)

    clouds: List[PointCloud] = [dense_cloud]
    level_features: List[np.ndarray] = [features]
    chain: List[Tuple[np.ndarray, int]] = []
    last = len(cfg.voxel_sizes) - 1
    for k, voxel in enumerate(cfg.voxel_sizes[1:], start=1):
        previous = clouds[-1]
        members = core.voxel_assignment(previous.points, voxel)
        coarse = core.voxel_downsample(previous, voxel)
        if len(coarse) >= len(previous):
            raise EncodingError(f"degenerate cloud: level {k} does not shrink ({len(coarse)} points)")
        chain.append((members, len(coarse)))
        clouds.append(coarse)
        if k < last:
            level_features.append(normalize_rows(_pool(level_features[-1], members, len(coarse), "mean")))

    supers = clouds[-1]
    counts = pool_through_chain(np.ones((len(dense_cloud), 1)), chain, "sum")
    pooled = normalize_rows(np.hstack([
        pool_through_chain(raw, chain, "sum") / counts,
        pool_through_chain(raw, chain, "max"),
    ]))
    elevation = elevated_support(dense_cloud.points, cfg)
    structure = elevation >= cfg.ground_clearance
    context = superpoint_context(supers.points, dense_cloud.points[structure], elevation[structure], cfg)
    level_features.append(embed(np.hstack([pooled, cfg.context_weight * context]), cfg.super_dim, tag=1))

    highest = pool_through_chain(elevation[:, None], chain, "max")[:, 0]
    salient = (counts[:, 0] >= cfg.min_support) & (highest >= cfg.ground_clearance)

    levels = []
    for k, (cloud, feats) in enumerate(zip(clouds, level_features)):
        parent = core.point_to_node_group(cloud, clouds[k + 1]) if k < last else None
        levels.append(FeatureLevel(cloud=cloud, features=feats, voxel_size=cfg.voxel_sizes[k], parent=parent))

    logger.debug(f"Pyramid level sizes: {[len(cloud) for cloud in clouds]}, salient superpoints: {int(salient.sum())}")
    return FeaturePyramid(levels=levels, salient=salient)


def image_filter_bank(img: ViewImage, cfg: EncoderConfig) -> np.ndarray:
    """
    Raw image channels before projection.

    Returns:
        np.ndarray: (H, W, 3 * len(scales) + 1); per scale the box-filtered
            value, horizontal gradient and vertical gradient, then a constant
            bias channel
    """
    channels = []
    for scale in cfg.image_scales:
        smoothed = uniform_filter(img.pixels, size=scale, mode="nearest")
        channels.append(smoothed)
        channels.append(np.gradient(smoothed, axis=1) * scale)
        channels.append(np.gradient(smoothed, axis=0) * scale)
    channels.append(np.ones_like(img.pixels))
    return np.stack(channels, axis=-1)


def encode_image(img: ViewImage, cfg: EncoderConfig) -> ImageFeatureGrid:
    """Per-pixel features of dimension `image_dim`, L2-normalized."""
    bank = image_filter_bank(img, cfg)
    height, width, depth = bank.shape
    features = embed(bank.reshape(-1, depth), cfg.image_dim, tag=2).reshape(height, width, cfg.image_dim)
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return ImageFeatureGrid(features=features, coords=np.stack([rows, cols], axis=-1))


def positional_encoding(
    coords: np.ndarray,
    dim: int,
    min_period: float = 0.5,
    max_period: float = 200.0,
) -> np.ndarray:
    """
    Sinusoidal encoding of 2D or 3D coordinates.

    Column pairs (2p, 2p + 1) hold sin and cos of one axis at one frequency;
    pairs cycle through the axes, and each axis steps through geometrically
    spaced periods from `min_period` to `max_period`. Every row has norm
    sqrt(dim / 2).

    Raises:
        EncodingError: If `dim` is odd
    """
    if dim % 2:
        raise EncodingError(f"positional encoding dim must be even, got {dim}")
    coords = np.asarray(coords, dtype=np.float64)
    coords = coords.reshape(coords.shape[0], -1) if coords.ndim > 1 else coords.reshape(-1, 1)
    n_axes = coords.shape[1]
    n_pairs = dim // 2
    per_axis = -(-n_pairs // n_axes)

    pair = np.arange(n_pairs)
    axis = pair % n_axes
    level = pair // n_axes
    ratio = level / (per_axis - 1) if per_axis > 1 else np.zeros(n_pairs)
    periods = min_period * (max_period / min_period) ** ratio

    phase = 2.0 * np.pi * coords[:, axis] / periods
    encoding = np.empty((coords.shape[0], dim))
    encoding[:, 0::2] = np.sin(phase)
    encoding[:, 1::2] = np.cos(phase)
    return encoding
