"""
Self-Test

Embedded invariant suite run by `crossreg selftest`: Sinkhorn marginals
and the Hungarian oracle, Procrustes recovery, RANSAC and LGR robustness,
focal-loss value and gradient, attention row sums and distance
invariance, the strict mask threshold, nearest-neighbor oracle and the
PLY round trip.

A check can be told to corrupt its own computation (fault injection), so
the harness itself can be verified to report failures.
"""

import logging
import os
import tempfile
import time
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel
from scipy.optimize import linear_sum_assignment

from errors import ConfigError
from models import (
    CorrespondenceSet,
    EstimatorConfig,
    EstimatorVariant,
    LossConfig,
    OverlapMask,
    OverlapProbabilities,
    PointCloud,
    RigidTransform,
)
from stages import core, densematch, estimators, fileio, loss, omp, vgam
from stages.attention import multi_head_attention

logger = logging.getLogger(__name__)

FAULT_ENV = "CROSSREG_SELFTEST_FAULT"

CheckFn = Callable[[np.random.Generator, bool], Tuple[bool, str]]


class CheckResult(BaseModel):
    name: str
    passed: bool
    detail: str
    elapsed_ms: float


def _offset(fault: bool, amount: float = 1e-3) -> float:
    return amount if fault else 0.0


def check_sinkhorn_marginals(rng: np.random.Generator, fault: bool) -> Tuple[bool, str]:
    worst = 0.0
    for _ in range(10):
        scores = densematch.augment_slack(rng.normal(size=(8, 8)), 1.0)
        plan = densematch.sinkhorn(scores, iterations=100)
        plan[0, 0] += _offset(fault)
        rows = np.abs(plan[:-1].sum(axis=1) - 1.0).max()
        cols = np.abs(plan[:, :-1].sum(axis=0) - 1.0).max()
        worst = max(worst, rows, cols)
    return worst <= 1e-6, f"max marginal deviation {worst:.2e}"


def check_hungarian_oracle(rng: np.random.Generator, fault: bool) -> Tuple[bool, str]:
    for size in range(2, 7):
        perm = rng.permutation(size)
        scores = rng.normal(scale=0.1, size=(size, size))
        scores[np.arange(size), perm] += 3.0
        plan = densematch.sinkhorn(scores, iterations=100, dustbin=False)
        index = np.arange(size)
        found = densematch.extract_group_matches(plan, size, index, index, dustbin=False)
        rows, cols = linear_sum_assignment(-scores)
        expected = {(int(r), int(c)) for r, c in zip(rows, cols)}
        got = {(int(i), int(j)) for i, j in found.pairs}
        if fault:
            got = {(i, (j + 1) % size) for i, j in got}
        if got != expected:
            return False, f"mismatch at size {size}"
    return True, "sizes 2-6 agree"


def check_svd_recovery(rng: np.random.Generator, fault: bool) -> Tuple[bool, str]:
    worst_rre, worst_rte = 0.0, 0.0
    for _ in range(100):
        gt = core.random_transform(rng)
        source = PointCloud(points=rng.uniform(-5.0, 5.0, size=(10, 3)))
        target = core.apply_transform(gt, source)
        target.points[0] += _offset(fault, 1.0)
        index = np.arange(10)
        c = CorrespondenceSet(pairs=np.stack([index, index], axis=1))
        pose = estimators.weighted_svd(c, source, target)
        worst_rre = max(worst_rre, core.rre(pose.transform.rotation, gt.rotation))
        worst_rte = max(worst_rte, core.rte(pose.transform.translation, gt.translation))
    return worst_rre < 1e-7 and worst_rte < 1e-9, f"worst RRE {worst_rre:.2e} deg, RTE {worst_rte:.2e} m"


def outlier_instance(
    rng: np.random.Generator, n: int = 200, inlier_fraction: float = 0.7, box: float = 20.0
) -> Tuple[PointCloud, PointCloud, CorrespondenceSet, RigidTransform]:
    """Correspondences with a fraction of uniform outliers inside a cube of side `box`."""
    gt = core.random_transform(rng)
    source = PointCloud(points=rng.uniform(-box / 2, box / 2, size=(n, 3)))
    target_points = core.transform_points(gt, source.points)
    outliers = rng.permutation(n)[: n - int(round(inlier_fraction * n))]
    target_points[outliers] = rng.uniform(-box / 2, box / 2, size=(outliers.size, 3))
    index = np.arange(n)
    return source, PointCloud(points=target_points), CorrespondenceSet(pairs=np.stack([index, index], axis=1)), gt


def check_ransac_outliers(rng: np.random.Generator, fault: bool) -> Tuple[bool, str]:
    source, target, c, gt = outlier_instance(rng)
    cfg = EstimatorConfig(variant=EstimatorVariant.RANSAC, ransac_iterations=2000, seed=7)
    pose = estimators.ransac(c, source, target, cfg)
    error = core.rre(pose.transform.rotation, gt.rotation) + _offset(fault, 1.0)
    return error < 0.1, f"RRE {error:.2e} deg with 30% outliers"


def corrupted_group_instance(
    rng: np.random.Generator, groups: int = 5, per_group: int = 12
) -> Tuple[PointCloud, PointCloud, CorrespondenceSet, List[CorrespondenceSet], RigidTransform]:
    """Clean groups plus one group mapped onto random target points."""
    gt = core.random_transform(rng)
    n = groups * per_group
    centers = rng.uniform(-15.0, 15.0, size=(groups, 3))
    source_points = np.repeat(centers, per_group, axis=0) + rng.normal(scale=1.0, size=(n, 3))
    garbage = rng.uniform(-20.0, 20.0, size=(per_group, 3))
    target = PointCloud(points=np.vstack([core.transform_points(gt, source_points), garbage]))

    sets = []
    for g in range(groups):
        members = np.arange(g * per_group, (g + 1) * per_group)
        mapped = members if g < groups - 1 else np.arange(n, n + per_group)
        sets.append(CorrespondenceSet(pairs=np.stack([members, mapped], axis=1), granularity="dense"))
    index = np.arange(groups)
    c_super = CorrespondenceSet(pairs=np.stack([index, index], axis=1))
    return PointCloud(points=source_points), target, c_super, sets, gt


def check_lgr_corrupted_group(rng: np.random.Generator, fault: bool) -> Tuple[bool, str]:
    source, target, c_super, groups, gt = corrupted_group_instance(rng)
    pose = estimators.lgr(c_super, groups, source, target, EstimatorConfig())
    error = core.rre(pose.transform.rotation, gt.rotation) + _offset(fault, 1.0)
    costs = pose.refinement_costs
    monotone = all(b <= a for a, b in zip(costs, costs[1:]))
    return error < 0.1 and monotone, f"RRE {error:.2e} deg, {len(costs)} refinement costs"


def check_focal_value(rng: np.random.Generator, fault: bool) -> Tuple[bool, str]:
    report = loss.focal_mask_loss(OverlapProbabilities(values=[0.5]), OverlapMask(values=[1]), LossConfig())
    expected = 0.25 * 0.25 * np.log(2.0)
    error = abs(report.loss + _offset(fault) - expected)
    return error < 1e-9, f"|loss - 0.25*0.25*ln2| = {error:.2e}"


def check_focal_gradient(rng: np.random.Generator, fault: bool) -> Tuple[bool, str]:
    p = rng.uniform(0.01, 0.99, size=64)
    mask = OverlapMask(values=rng.integers(0, 2, size=64))
    cfg = LossConfig()
    analytic = loss.focal_loss_gradient(OverlapProbabilities(values=p), mask, cfg)
    analytic = analytic * (1.0 + _offset(fault))
    h = 1e-5
    plus = loss.focal_mask_loss(OverlapProbabilities(values=p + h), mask, cfg).per_element
    minus = loss.focal_mask_loss(OverlapProbabilities(values=p - h), mask, cfg).per_element
    numeric = (plus - minus) / (2.0 * h) / p.size
    relative = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(relative.max()) <= 1e-5, f"max relative error {relative.max():.2e}"


def check_attention_rows(rng: np.random.Generator, fault: bool) -> Tuple[bool, str]:
    dim, heads = 16, 4
    weights = [rng.normal(size=(dim, dim)) for _ in range(4)]
    _, attention = multi_head_attention(rng.normal(size=(6, dim)), rng.normal(size=(9, dim)), *weights, heads)
    deviation = np.abs(attention.sum(axis=2) - 1.0).max() + _offset(fault)
    return deviation <= 1e-6, f"max row-sum deviation {deviation:.2e}"


def check_geometric_invariance(rng: np.random.Generator, fault: bool) -> Tuple[bool, str]:
    dim = 16
    w = vgam.default_vgam_weights(dim, 8, pos_dim=8, dist_dim=8)
    w = w.model_copy(update={"w_dist": rng.normal(size=8), "wv_g": rng.normal(size=(dim, dim))})
    features = rng.normal(size=(7, dim))
    positions = rng.uniform(-10.0, 10.0, size=(7, 3))
    reference = vgam.geometric_self_attention(features, positions, w)
    worst = 0.0
    for _ in range(50):
        moved = core.transform_points(core.random_transform(rng), positions)
        moved[0] += _offset(fault, 5.0)
        worst = max(worst, float(np.abs(vgam.geometric_self_attention(features, moved, w) - reference).max()))
    return worst <= 1e-9, f"max output change {worst:.2e}"


def check_strict_threshold(rng: np.random.Generator, fault: bool) -> Tuple[bool, str]:
    p = 0.5 + _offset(fault)
    mask = omp.threshold_mask(OverlapProbabilities(values=[p, 0.6, 0.4999]), 0.5)
    return mask.values.tolist() == [False, True, False], f"mask {mask.values.astype(int).tolist()}"


def check_nearest_neighbor_oracle(rng: np.random.Generator, fault: bool) -> Tuple[bool, str]:
    cloud = PointCloud(points=rng.uniform(-5.0, 5.0, size=(1000, 3)))
    queries = rng.uniform(-6.0, 6.0, size=(100, 3))
    indices, _ = core.KdIndex(cloud).nearest(queries)
    brute = np.argmin(np.linalg.norm(cloud.points[None] - queries[:, None], axis=2), axis=1)
    if fault:
        indices = (indices + 1) % len(cloud)
    mismatches = int(np.count_nonzero(indices != brute))
    return mismatches == 0, f"{mismatches} mismatches over 100 queries"


def check_ply_round_trip(rng: np.random.Generator, fault: bool) -> Tuple[bool, str]:
    cloud = PointCloud(points=rng.normal(scale=20.0, size=(50, 3)), intensity=rng.uniform(size=50))
    with tempfile.TemporaryDirectory() as directory:
        path = os.path.join(directory, "cloud.ply")
        fileio.write_ply(path, cloud)
        first = fileio.format_ply(fileio.read_ply(path))
    original = fileio.format_ply(cloud)
    if fault:
        first = first.replace("ply", "ply ", 1)
    return first == original, "write-read-write identical" if first == original else "bytes differ"


CHECKS: Dict[str, CheckFn] = {
    "sinkhorn_marginals": check_sinkhorn_marginals,
    "hungarian_oracle": check_hungarian_oracle,
    "svd_recovery": check_svd_recovery,
    "ransac_outliers": check_ransac_outliers,
    "lgr_corrupted_group": check_lgr_corrupted_group,
    "focal_value": check_focal_value,
    "focal_gradient": check_focal_gradient,
    "attention_rows": check_attention_rows,
    "geometric_invariance": check_geometric_invariance,
    "strict_threshold": check_strict_threshold,
    "nearest_neighbor_oracle": check_nearest_neighbor_oracle,
    "ply_round_trip": check_ply_round_trip,
}


def run_selftest(inject_fault: Optional[str] = None, seed: int = 0) -> List[CheckResult]:
    """
    Run every check with its own seeded generator.

    Args:
        inject_fault: Name of a check that should corrupt its computation
        seed: Base seed

    Raises:
        ConfigError: If `inject_fault` names no check
    """
    if inject_fault and inject_fault not in CHECKS:
        raise ConfigError(f"unknown self-test check '{inject_fault}'")
    results = []
    for number, (name, check) in enumerate(CHECKS.items()):
        start = time.perf_counter()
        try:
            passed, detail = check(np.random.default_rng([seed, number]), name == inject_fault)
        except Exception as e:
            passed, detail = False, f"raised {type(e).__name__}: {e}"
        elapsed = (time.perf_counter() - start) * 1000.0
        if not passed:
            logger.error(f"Self-test check {name} failed: {detail}")
        results.append(CheckResult(name=name, passed=bool(passed), detail=detail, elapsed_ms=elapsed))
    return results


def format_results(results: List[CheckResult]) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'} {r.name} ({r.detail})" for r in results]
    passed = sum(r.passed for r in results)
    lines.append(f"{passed}/{len(results)} checks passed")
    return "\n".join(lines) + "\n"
