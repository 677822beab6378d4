"""
Dense Matching

Propagates superpoint correspondences to dense points. For every
superpoint pair the two dense groups (point-to-node grouping) are compared
with S = G_i G_j^T / d, a slack row and column of value alpha are appended,
Sinkhorn runs in log space, and the top K' interior entries become dense
correspondences. Per-group sets are merged into the global set C*.
"""

import logging
from typing import Iterable, List, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from errors import MatchingError
from models import (
    CorrespondenceSet,
    FeatureLevel,
    Granularity,
    GroupedProblem,
    MatchConfig,
)
from stages import core

logger = logging.getLogger(__name__)

CONVERGENCE_CHECK = 10


def build_group_similarity(feat_src: np.ndarray, feat_tgt: np.ndarray, dim: Optional[int] = None) -> np.ndarray:
    """
    S = F_src F_tgt^T / d (linear scaling).

    Raises:
        MatchingError: For an empty group or mismatched feature dims
    """
    if feat_src.shape[0] == 0 or feat_tgt.shape[0] == 0:
        raise MatchingError("empty dense group")
    if feat_src.shape[1] != feat_tgt.shape[1]:
        raise MatchingError(f"feature dims differ: {feat_src.shape[1]} vs {feat_tgt.shape[1]}")
    dim = feat_src.shape[1] if dim is None else dim
    return feat_src @ feat_tgt.T / dim


def augment_slack(scores: np.ndarray, alpha: float) -> np.ndarray:
    """Append a slack row and column filled with alpha."""
    m, n = scores.shape
    augmented = np.full((m + 1, n + 1), float(alpha))
    augmented[:m, :n] = scores
    return augmented


def _row_deviation(scores: np.ndarray, u: np.ndarray, v: np.ndarray, log_mu: np.ndarray) -> float:
    row_mass = np.exp(logsumexp(scores + u[:, None] + v[None, :], axis=1))
    return float(np.abs(row_mass - np.exp(log_mu)).sum())


def sinkhorn_log(
    scores: np.ndarray,
    iterations: int = 100,
    dustbin: bool = True,
    history: Optional[List[float]] = None,
    tolerance: float = 0.0,
) -> np.ndarray:
    """
    Log-space Sinkhorn normalization.

    With `dustbin`, the last row and column are slack: every interior row and
    column carries unit mass, the slack row carries n and the slack column m.
    Without it all rows carry unit mass and columns share the same total.

    Args:
        scores: Log-potentials, slack-augmented when `dustbin` is set
        iterations: Number of row/column sweeps
        dustbin: Treat the last row/column as slack
        history: When given, receives the L1 row-marginal deviation after each sweep
        tolerance: Stop once that deviation falls below this value, checked
            every `CONVERGENCE_CHECK` sweeps; ignored while recording `history`

    Returns:
        np.ndarray: Log of the transport plan

    Raises:
        MatchingError: For non-finite scores or iterations < 1
    """
    if iterations < 1:
        raise MatchingError(f"iterations must be >= 1, got {iterations}")
    if not np.all(np.isfinite(scores)):
        raise MatchingError("non-finite scores in Sinkhorn input")

    rows, cols = scores.shape
    if dustbin:
        m, n = rows - 1, cols - 1
        log_mu = np.append(np.zeros(m), np.log(n)) if n > 0 else np.zeros(rows)
        log_nu = np.append(np.zeros(n), np.log(m)) if m > 0 else np.zeros(cols)
    else:
        log_mu = np.zeros(rows)
        log_nu = np.full(cols, np.log(rows / cols))

    u, v = np.zeros(rows), np.zeros(cols)
    for sweep in range(1, iterations + 1):
        u = log_mu - logsumexp(scores + v[None, :], axis=1)
        v = log_nu - logsumexp(scores + u[:, None], axis=0)
        if history is not None:
            history.append(_row_deviation(scores, u, v, log_mu))
        elif tolerance > 0 and sweep % CONVERGENCE_CHECK == 0 and _row_deviation(scores, u, v, log_mu) < tolerance:
            break

    result = scores + u[:, None] + v[None, :]
    if not np.all(np.isfinite(result)):
        raise MatchingError("Sinkhorn produced non-finite values")
    return result


def sinkhorn(scores: np.ndarray, iterations: int = 100, dustbin: bool = True, tolerance: float = 0.0) -> np.ndarray:
    """Transport plan (probability space) of `sinkhorn_log`."""
    return np.exp(sinkhorn_log(scores, iterations, dustbin, tolerance=tolerance))


def extract_group_matches(
    assignment: np.ndarray,
    k: int,
    src_indices: np.ndarray,
    tgt_indices: np.ndarray,
    dustbin: bool = True,
    min_confidence: float = 0.0,
) -> CorrespondenceSet:
    """
    Top-k interior entries of an assignment as dense correspondences.

    The slack row and column are dropped first; ties resolve in (row, col)
    order; entries below `min_confidence` are discarded.
    """
    if k < 1:
        raise MatchingError(f"k must be >= 1, got {k}")
    interior = assignment[:-1, :-1] if dustbin else assignment
    flat = interior.reshape(-1)
    order = np.argsort(-flat, kind="stable")[:k]
    order = order[flat[order] >= min_confidence]
    rows, cols = np.divmod(order, interior.shape[1])
    pairs = np.stack([src_indices[rows], tgt_indices[cols]], axis=1)
    return CorrespondenceSet(pairs=pairs, confidence=flat[order], granularity=Granularity.DENSE)


def aggregate(sets: Iterable[CorrespondenceSet]) -> CorrespondenceSet:
    """
    Union of per-group sets; duplicate pairs keep their highest confidence.

    The output is sorted by (source index, target index), so it does not
    depend on the order of the inputs.
    """
    sets = list(sets)
    if not sets:
        logger.warning("No group correspondences to aggregate")
        return CorrespondenceSet.empty(Granularity.DENSE)

    pairs = np.concatenate([s.pairs for s in sets])
    confidence = np.concatenate([s.confidence for s in sets])
    if pairs.shape[0] == 0:
        logger.warning("All group correspondence sets are empty")
        return CorrespondenceSet.empty(Granularity.DENSE)

    # Sort by pair, highest confidence first inside each pair, keep the first
    order = np.lexsort((-confidence, pairs[:, 1], pairs[:, 0]))
    pairs, confidence = pairs[order], confidence[order]
    first = np.ones(pairs.shape[0], dtype=bool)
    first[1:] = np.any(pairs[1:] != pairs[:-1], axis=1)
    return CorrespondenceSet(pairs=pairs[first], confidence=confidence[first], granularity=Granularity.DENSE)


def nearest_members(members: np.ndarray, points: np.ndarray, center: np.ndarray, limit: int) -> np.ndarray:
    """The `limit` members closest to `center`, ties by index, returned sorted."""
    if members.size <= limit:
        return members
    distances = np.linalg.norm(points[members] - center, axis=1)
    return np.sort(members[np.argsort(distances, kind="stable")[:limit]])


def build_grouped_problems(
    c_super: CorrespondenceSet,
    dense_src: FeatureLevel,
    dense_tgt: FeatureLevel,
    supers_src: FeatureLevel,
    supers_tgt: FeatureLevel,
    max_group_points: Optional[int] = None,
) -> List[GroupedProblem]:
    """
    One matching problem per superpoint correspondence.

    Superpoints whose point-to-node group is empty are skipped. With
    `max_group_points`, each group keeps only its members nearest the
    superpoint, in increasing index order.
    """
    assign_src = core.point_to_node_group(dense_src.cloud, supers_src.cloud)
    assign_tgt = core.point_to_node_group(dense_tgt.cloud, supers_tgt.cloud)
    groups_src = core.group_members(assign_src, len(supers_src.cloud))
    groups_tgt = core.group_members(assign_tgt, len(supers_tgt.cloud))
    if max_group_points is not None:
        groups_src = [
            nearest_members(members, dense_src.cloud.points, center, max_group_points)
            for members, center in zip(groups_src, supers_src.cloud.points)
        ]
        groups_tgt = [
            nearest_members(members, dense_tgt.cloud.points, center, max_group_points)
            for members, center in zip(groups_tgt, supers_tgt.cloud.points)
        ]

    problems = []
    skipped = 0
    for (i, j), score in zip(c_super.pairs, c_super.confidence):
        members_src, members_tgt = groups_src[i], groups_tgt[j]
        if members_src.size == 0 or members_tgt.size == 0:
            skipped += 1
            continue
        problems.append(GroupedProblem(
            source_superpoint=int(i),
            target_superpoint=int(j),
            source_indices=members_src,
            target_indices=members_tgt,
            source_features=dense_src.features[members_src],
            target_features=dense_tgt.features[members_tgt],
            superpoint_score=float(score),
        ))
    if skipped:
        logger.debug(f"Skipped {skipped} superpoint pairs with an empty dense group")
    return problems


def solve_problem(problem: GroupedProblem, cfg: MatchConfig) -> CorrespondenceSet:
    """Dense correspondences of one group."""
    scores = build_group_similarity(problem.source_features, problem.target_features)
    assignment = sinkhorn(augment_slack(scores, cfg.slack_alpha), cfg.sinkhorn_iterations, tolerance=cfg.sinkhorn_tolerance)
    return extract_group_matches(
        assignment, cfg.top_k_per_group, problem.source_indices, problem.target_indices,
        min_confidence=cfg.min_confidence,
    )


def match_groups(problems: List[GroupedProblem], cfg: MatchConfig) -> List[CorrespondenceSet]:
    """
    Solve every grouped problem.

    With `weight_by_superpoint_score`, dense confidences are scaled by the
    superpoint score of their group divided by the largest superpoint score.
    """
    results = [solve_problem(problem, cfg) for problem in problems]
    if cfg.weight_by_superpoint_score and problems:
        top = max(problem.superpoint_score for problem in problems)
        if top > 0:
            results = [
                CorrespondenceSet(
                    pairs=result.pairs,
                    confidence=result.confidence * (problem.superpoint_score / top),
                    granularity=Granularity.DENSE,
                )
                for result, problem in zip(results, problems)
            ]
    return results


def match_dense(
    c_super: CorrespondenceSet,
    dense_src: FeatureLevel,
    dense_tgt: FeatureLevel,
    supers_src: FeatureLevel,
    supers_tgt: FeatureLevel,
    cfg: MatchConfig,
) -> Tuple[List[CorrespondenceSet], CorrespondenceSet]:
    """
    Full dense stage.

    Returns:
        Tuple of (per-group sets, aggregated C*)
    """
    problems = build_grouped_problems(c_super, dense_src, dense_tgt, supers_src, supers_tgt, cfg.max_group_points)
    groups = match_groups(problems, cfg)
    c_dense = aggregate(groups)
    logger.debug(f"Dense matching: {len(problems)} groups, {len(c_dense)} correspondences")
    return groups, c_dense
