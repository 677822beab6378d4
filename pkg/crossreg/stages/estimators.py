"""
Pose Estimators

Rigid pose from correspondences:

- weighted SVD: closed-form weighted Procrustes over all correspondences;
- RANSAC: minimal 3-pair hypotheses in seeded chunks, best consensus refit;
- LGR: one hypothesis per superpoint group, grown over the groups whose
  centroid distances agree with it, the hypothesis with most global inliers
  wins, then iterative refitting on the global inliers.
"""

import logging
from typing import List, Optional, Tuple

import numpy as np

from errors import CrossRegError, EstimationError
from models import (
    CorrespondenceSet,
    EstimatorConfig,
    EstimatorVariant,
    PointCloud,
    PoseEstimate,
    RigidTransform,
)
from stages.densematch import aggregate

logger = logging.getLogger(__name__)

DEGENERACY_THRESHOLD = 1e-12
DEFAULT_INLIER_THRESHOLD = 0.5


def procrustes(source: np.ndarray, target: np.ndarray, weights: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Weighted Procrustes: R, t minimizing sum_k w_k ||R p_k + t - q_k||^2.

    Raises:
        EstimationError: "underdetermined" for fewer than 3 weighted pairs,
            "degenerate" for collinear or coincident configurations
    """
    weights = np.ones(source.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    if np.count_nonzero(weights > 0) < 3:
        raise EstimationError("underdetermined")
    weights = weights / weights.sum()

    centroid_src = weights @ source
    centroid_tgt = weights @ target
    covariance = (source - centroid_src).T @ ((target - centroid_tgt) * weights[:, None])

    u, s, vt = np.linalg.svd(covariance)
    if s[1] <= DEGENERACY_THRESHOLD * max(s[0], 1.0):
        raise EstimationError("degenerate")
    v = vt.T
    correction = np.diag([1.0, 1.0, np.sign(np.linalg.det(v @ u.T))])
    rotation = v @ correction @ u.T
    return rotation, centroid_tgt - rotation @ centroid_src


def _batched_kabsch(source: np.ndarray, target: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Unweighted Kabsch for (B, k, 3) sample stacks."""
    centroid_src = source.mean(axis=1, keepdims=True)
    centroid_tgt = target.mean(axis=1, keepdims=True)
    covariance = np.einsum("bki,bkj->bij", source - centroid_src, target - centroid_tgt)
    u, _, vt = np.linalg.svd(covariance)
    v = np.transpose(vt, (0, 2, 1))
    sign = np.sign(np.linalg.det(v @ np.transpose(u, (0, 2, 1))))
    sign[sign == 0] = 1.0
    v[:, :, 2] *= sign[:, None]
    rotations = v @ np.transpose(u, (0, 2, 1))
    translations = centroid_tgt[:, 0] - np.einsum("bij,bj->bi", rotations, centroid_src[:, 0])
    return rotations, translations


def _residuals(rotations: np.ndarray, translations: np.ndarray, source: np.ndarray, target: np.ndarray) -> np.ndarray:
    """(B, k) residuals of k pairs under B hypotheses."""
    moved = np.einsum("bij,kj->bki", rotations, source) + translations[:, None, :]
    return np.linalg.norm(moved - target[None], axis=2)


def _pair_points(c: CorrespondenceSet, src: PointCloud, tgt: PointCloud) -> Tuple[np.ndarray, np.ndarray]:
    if not c.within_bounds(len(src), len(tgt)):
        raise EstimationError("correspondence index out of bounds")
    return src.points[c.source_indices], tgt.points[c.target_indices]


def _estimate(
    rotation: np.ndarray,
    translation: np.ndarray,
    source: np.ndarray,
    target: np.ndarray,
    threshold: float,
    variant: EstimatorVariant,
    refinement_costs: Optional[List[float]] = None,
) -> PoseEstimate:
    residuals = np.linalg.norm(source @ rotation.T + translation - target, axis=1)
    inliers = residuals < threshold
    return PoseEstimate(
        transform=RigidTransform(rotation=rotation, translation=translation),
        inlier_count=int(inliers.sum()),
        mean_residual=float(residuals[inliers].mean()) if inliers.any() else 0.0,
        variant=variant,
        refinement_costs=refinement_costs or [],
    )


def weighted_svd(
    c: CorrespondenceSet,
    src: PointCloud,
    tgt: PointCloud,
    threshold: float = DEFAULT_INLIER_THRESHOLD,
) -> PoseEstimate:
    """
    Closed-form pose from all correspondences, weighted by their confidence.

    Args:
        c: Correspondences
        src: Cloud the source indices refer to
        tgt: Cloud the target indices refer to
        threshold: Residual below which a pair counts as an inlier

    Returns:
        PoseEstimate: Weighted Procrustes solution

    Raises:
        EstimationError: "underdetermined" or "degenerate"
    """
    if len(c) < 3:
        raise EstimationError("underdetermined")
    source, target = _pair_points(c, src, tgt)
    rotation, translation = procrustes(source, target, c.confidence)
    return _estimate(rotation, translation, source, target, threshold, EstimatorVariant.WEIGHTED_SVD)


def ransac(c: CorrespondenceSet, src: PointCloud, tgt: PointCloud, cfg: EstimatorConfig) -> PoseEstimate:
    """
    RANSAC over minimal 3-pair samples.

    Hypotheses are drawn in chunks of `cfg.ransac_chunk`; chunk b uses the
    generator seeded with (seed, b), so chunked and serial evaluation agree.
    The hypothesis with most inliers (first one on ties) is refit with
    weighted SVD on its inliers.

    Raises:
        EstimationError: "underdetermined" for fewer than 3 pairs,
            "no consensus" when no hypothesis reaches 3 inliers
    """
    if len(c) < 3:
        raise EstimationError("underdetermined")
    source, target = _pair_points(c, src, tgt)
    k = source.shape[0]

    best_count, best_inliers = -1, None
    for chunk, start in enumerate(range(0, cfg.ransac_iterations, cfg.ransac_chunk)):
        size = min(cfg.ransac_chunk, cfg.ransac_iterations - start)
        rng = np.random.default_rng([cfg.seed, chunk])
        samples = rng.integers(0, k, size=(size, cfg.ransac_sample_size))
        rotations, translations = _batched_kabsch(source[samples], target[samples])
        inliers = _residuals(rotations, translations, source, target) < cfg.inlier_threshold
        counts = inliers.sum(axis=1)
        winner = int(np.argmax(counts))
        if counts[winner] > best_count:
            best_count, best_inliers = int(counts[winner]), inliers[winner]

    if best_count < 3:
        raise EstimationError("no consensus")
    try:
        rotation, translation = procrustes(source[best_inliers], target[best_inliers], c.confidence[best_inliers])
    except EstimationError:
        # Zero-confidence or degenerate consensus: refit unweighted
        rotation, translation = procrustes(source[best_inliers], target[best_inliers])
    logger.debug(f"RANSAC consensus: {best_count}/{k} inliers")
    return _estimate(rotation, translation, source, target, cfg.inlier_threshold, EstimatorVariant.RANSAC)


def truncated_cost(residuals: np.ndarray, threshold: float) -> float:
    """mean(min(r, threshold)): every outlier costs exactly the threshold."""
    return float(np.mean(np.minimum(residuals, threshold))) if residuals.size else 0.0


def leading_eigenvector(matrix: np.ndarray, iterations: int = 20) -> np.ndarray:
    """Power iteration on a non-negative symmetric matrix, scaled to a maximum of 1; all ones when it vanishes."""
    vector = np.ones(matrix.shape[0])
    for _ in range(iterations):
        product = matrix @ vector
        norm = np.linalg.norm(product)
        if norm <= DEGENERACY_THRESHOLD:
            return np.ones(matrix.shape[0])
        vector = product / norm
    return vector / vector.max()


def group_compatibility(
    centroids_src: np.ndarray,
    centroids_tgt: np.ndarray,
    threshold: float,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Pairwise consistency of group centroid pairs under a rigid motion.

    Two groups are compatible when the distance between their source
    centroids and between their target centroids differ by less than
    `threshold`.

    Returns:
        Tuple of (second-order compatibility counts, soft compatibility
        1 - change^2 / threshold^2 clipped at 0 with a zero diagonal)
    """
    change = np.abs(
        np.linalg.norm(centroids_src[:, None] - centroids_src[None], axis=2)
        - np.linalg.norm(centroids_tgt[:, None] - centroids_tgt[None], axis=2)
    )
    hard = (change < threshold).astype(np.float64)
    second_order = (hard @ hard) * hard
    soft = np.clip(1.0 - change ** 2 / threshold ** 2, 0.0, None)
    np.fill_diagonal(soft, 0.0)
    return second_order, soft


def _weighted_centroids(points: List[np.ndarray], weights: List[np.ndarray]) -> np.ndarray:
    centroids = []
    for p, w in zip(points, weights):
        total = w.sum()
        centroids.append(w @ p / total if total > 0 else p.mean(axis=0))
    return np.stack(centroids)


def local_candidates(
    groups: List[CorrespondenceSet],
    src: PointCloud,
    tgt: PointCloud,
    cfg: EstimatorConfig,
) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """
    One pose candidate per group with at least `lgr_min_group_pairs` pairs.

    With `lgr_seed_neighbors`, each group seeds a candidate fitted on its own
    pairs plus those of its most compatible groups (second-order count), the
    pooled pairs weighted by dense confidence times the member's entry in
    the leading eigenvector of their soft compatibility. A seed whose pooled
    fit fails falls back to its own pairs.
    """
    valid = [group for group in groups if len(group) >= cfg.lgr_min_group_pairs]
    pairs = [_pair_points(group, src, tgt) for group in valid]
    confidences = [group.confidence for group in valid]

    second_order = soft = None
    if cfg.lgr_seed_neighbors > 0 and len(valid) > 1:
        second_order, soft = group_compatibility(
            _weighted_centroids([p[0] for p in pairs], confidences),
            _weighted_centroids([p[1] for p in pairs], confidences),
            cfg.lgr_compatibility_threshold,
        )

    rotations, translations = [], []
    for seed, ((source, target), confidence) in enumerate(zip(pairs, confidences)):
        fits = [(source, target, confidence)]
        if second_order is not None:
            order = np.argsort(-second_order[seed], kind="stable")
            order = order[(order != seed) & (second_order[seed, order] > 0)][:cfg.lgr_seed_neighbors]
            if order.size:
                members = np.concatenate([[seed], order])
                weights = leading_eigenvector(soft[np.ix_(members, members)])
                fits.insert(0, (
                    np.concatenate([pairs[g][0] for g in members]),
                    np.concatenate([pairs[g][1] for g in members]),
                    np.concatenate([confidences[g] * w for g, w in zip(members, weights)]),
                ))
        for fit_source, fit_target, fit_weights in fits:
            try:
                rotation, translation = procrustes(fit_source, fit_target, fit_weights)
            except EstimationError as e:
                logger.debug(f"LGR candidate skipped: {e}")
                continue
            rotations.append(rotation)
            translations.append(translation)
            break
    return rotations, translations


def lgr(
    c_super: CorrespondenceSet,
    groups: List[CorrespondenceSet],
    src: PointCloud,
    tgt: PointCloud,
    cfg: EstimatorConfig,
) -> PoseEstimate:
    """
    Local-to-global registration.

    Local phase: one weighted SVD candidate per group with at least
    `lgr_min_group_pairs` pairs, grown over compatible groups (see
    `local_candidates`). Global phase: the candidate with the most inliers over the merged
    set C* wins (lowest inlier mean residual on ties). Refinement: refit on
    the current global inliers up to `lgr_iterations` times; a step is kept
    only if neither the truncated cost nor the inlier mean residual grows.

    Args:
        c_super: Superpoint correspondences the groups came from
        groups: Dense correspondence set per superpoint correspondence
        src: Cloud the dense source indices refer to
        tgt: Cloud the dense target indices refer to
        cfg: Estimator settings

    Raises:
        EstimationError: When no group yields a candidate
    """
    c_dense = aggregate(groups)
    if len(c_dense) == 0:
        raise EstimationError("no group with at least 3 correspondences")
    source, target = _pair_points(c_dense, src, tgt)
    threshold = cfg.lgr_threshold

    rotations, translations = local_candidates(groups, src, tgt, cfg)
    if not rotations:
        raise EstimationError("no group with at least 3 correspondences")
    logger.debug(f"LGR: {len(rotations)} candidates from {len(groups)} groups ({len(c_super)} superpoint pairs)")

    residuals = _residuals(np.stack(rotations), np.stack(translations), source, target)
    inliers = residuals < threshold
    counts = inliers.sum(axis=1)
    means = np.array([r[m].mean() if m.any() else np.inf for r, m in zip(residuals, inliers)])
    best = int(np.lexsort((means, -counts))[0])

    rotation, translation = rotations[best], translations[best]
    current = residuals[best]
    costs = [truncated_cost(current, threshold)]
    current_mean = means[best]

    for _ in range(cfg.lgr_iterations):
        mask = current < threshold
        if mask.sum() < 3:
            break
        try:
            new_rotation, new_translation = procrustes(source[mask], target[mask], c_dense.confidence[mask])
        except EstimationError:
            break
        new_residuals = np.linalg.norm(source @ new_rotation.T + new_translation - target, axis=1)
        new_mask = new_residuals < threshold
        new_cost = truncated_cost(new_residuals, threshold)
        new_mean = new_residuals[new_mask].mean() if new_mask.any() else np.inf
        if new_cost > costs[-1] or new_mean > current_mean:
            break
        rotation, translation, current = new_rotation, new_translation, new_residuals
        costs.append(new_cost)
        current_mean = new_mean

    return _estimate(rotation, translation, source, target, threshold, EstimatorVariant.LGR, costs)


def estimate(
    c_super: CorrespondenceSet,
    groups: List[CorrespondenceSet],
    src: PointCloud,
    tgt: PointCloud,
    cfg: EstimatorConfig,
) -> PoseEstimate:
    """Dispatch on `cfg.variant`; weighted SVD and RANSAC use the merged set C*."""
    c_dense = aggregate(groups)
    try:
        if cfg.variant == EstimatorVariant.WEIGHTED_SVD:
            return weighted_svd(c_dense, src, tgt, cfg.inlier_threshold)
        if cfg.variant == EstimatorVariant.RANSAC:
            return ransac(c_dense, src, tgt, cfg)
        return lgr(c_super, groups, src, tgt, cfg)
    except CrossRegError:
        raise
    except np.linalg.LinAlgError as e:
        raise EstimationError(f"linear algebra failure: {str(e)}")
