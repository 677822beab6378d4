"""
Core Geometry

Rigid transforms, spatial queries, voxel downsampling, point-to-node grouping
and the registration metrics (RRE, RTE, IR, RR).

All functions are pure; a KdIndex is built once and then only read, so it can
be shared between threads.
"""

import logging
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from errors import EmptyInputError, GeometryError
from models import CorrespondenceSet, PointCloud, RegistrationMetrics, RigidTransform

logger = logging.getLogger(__name__)

DEFAULT_RRE_THRESHOLD = 2.0
DEFAULT_RTE_THRESHOLD = 0.5
DEFAULT_IR_THRESHOLD = 1.0

# Candidates fetched per query before the exact tie-break
_CANDIDATES = 8


def identity() -> RigidTransform:
    return RigidTransform.identity()


def apply_transform(t: RigidTransform, c: PointCloud) -> PointCloud:
    """
    Apply x -> R x + t to every point, keeping order and attributes.

    Args:
        t: Transform to apply
        c: Input cloud

    Returns:
        PointCloud: Transformed copy of the cloud
    """
    points = c.points @ t.rotation.T + t.translation
    intensity = None if c.intensity is None else c.intensity.copy()
    return PointCloud(points=points, intensity=intensity)


def transform_points(t: RigidTransform, points: np.ndarray) -> np.ndarray:
    """Array form of apply_transform."""
    return np.asarray(points, dtype=np.float64) @ t.rotation.T + t.translation


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return the transform that applies `b` first, then `a`."""
    return RigidTransform(
        rotation=a.rotation @ b.rotation,
        translation=a.rotation @ b.translation + a.translation,
    )


def inverse(t: RigidTransform) -> RigidTransform:
    rotation_t = t.rotation.T
    return RigidTransform(rotation=rotation_t, translation=-rotation_t @ t.translation)


def random_transform(rng: np.random.Generator, max_translation: float = 10.0) -> RigidTransform:
    """Uniformly random rotation with a translation drawn from a cube."""
    rotation = Rotation.random(random_state=rng).as_matrix()
    translation = rng.uniform(-max_translation, max_translation, size=3)
    return RigidTransform(rotation=rotation, translation=translation)


def voxel_downsample(c: PointCloud, voxel: float) -> PointCloud:
    """
    Replace the points of every occupied voxel by their centroid.

    Output order follows the lexicographic order of the integer voxel
    coordinates floor(p / voxel). Intensity, when present, is averaged
    the same way.

    Args:
        c: Input cloud
        voxel: Voxel edge length in meters

    Returns:
        PointCloud: One point per occupied voxel

    Raises:
        GeometryError: If voxel is not positive
    """
    if voxel <= 0:
        raise GeometryError(f"voxel size must be > 0, got {voxel}")
    if len(c) == 0:
        return PointCloud.empty()

    points, inverse_index, counts = _voxel_groups(c.points, voxel)
    intensity = None
    if c.intensity is not None:
        intensity = np.bincount(inverse_index, weights=c.intensity) / counts
    return PointCloud(points=points, intensity=intensity)


def voxel_assignment(points: np.ndarray, voxel: float) -> np.ndarray:
    """Index of the voxel_downsample output point each input point fell into."""
    _, inverse_index, _ = _voxel_groups(points, voxel)
    return inverse_index


def _voxel_groups(points: np.ndarray, voxel: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    keys = np.floor(points / voxel).astype(np.int64)
    _, inverse_index = np.unique(keys, axis=0, return_inverse=True)
    inverse_index = inverse_index.reshape(-1)
    counts = np.bincount(inverse_index).astype(np.float64)
    centroids = np.stack(
        [np.bincount(inverse_index, weights=points[:, axis]) for axis in range(3)], axis=1
    ) / counts[:, None]
    return centroids, inverse_index, counts


class KdIndex:
    """
    Nearest-neighbor index over a fixed cloud.

    Ties between equidistant points resolve to the lowest point index.
    """

    def __init__(self, cloud: PointCloud):
        if len(cloud) == 0:
            raise GeometryError("empty reference cloud")
        self.points = cloud.points
        self.tree = cKDTree(self.points)

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def nearest(self, queries: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """
        Nearest reference point for every query row.

        Args:
            queries: (q, 3) query coordinates

        Returns:
            Tuple of (indices, distances), both of length q
        """
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if queries.shape[0] == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)

        k = min(_CANDIDATES, len(self))
        _, candidates = self.tree.query(queries, k=k)
        candidates = np.asarray(candidates, dtype=np.int64).reshape(queries.shape[0], k)

        # Exact distances, then lowest index among the minima
        distances = np.linalg.norm(self.points[candidates] - queries[:, None, :], axis=2)
        best = distances.min(axis=1)
        tied = distances == best[:, None]
        masked = np.where(tied, candidates, np.iinfo(np.int64).max)
        indices = masked.min(axis=1)

        # Every candidate tied: more equidistant points may exist beyond k
        if k < len(self):
            for row in np.flatnonzero(tied.all(axis=1)):
                indices[row] = self._lowest_at_distance(queries[row], best[row])
        return indices, best

    def _lowest_at_distance(self, query: np.ndarray, distance: float) -> int:
        radius = distance * (1.0 + 1e-12) + 1e-300
        members = np.asarray(self.tree.query_ball_point(query, r=radius), dtype=np.int64)
        exact = np.linalg.norm(self.points[members] - query, axis=1)
        return int(members[exact == exact.min()].min())

    def within(self, queries: np.ndarray, radius: float) -> np.ndarray:
        """True for every query with a reference point at distance <= radius."""
        queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
        if queries.shape[0] == 0:
            return np.zeros(0, dtype=bool)
        distances, _ = self.tree.query(queries, k=1)
        return distances <= radius


def nearest_neighbor(query: Sequence[float], c: PointCloud) -> Tuple[int, float]:
    """
    Find the point of `c` closest to `query`.

    Raises:
        GeometryError: If the cloud is empty
    """
    indices, distances = KdIndex(c).nearest(np.asarray(query, dtype=np.float64))
    return int(indices[0]), float(distances[0])


def point_to_node_group(dense: PointCloud, supers: PointCloud) -> np.ndarray:
    """
    Assign every dense point to its nearest superpoint.

    Returns:
        np.ndarray: (|dense|,) superpoint index per dense point
    """
    if len(dense) == 0:
        raise GeometryError("empty dense cloud")
    indices, _ = KdIndex(supers).nearest(dense.points)
    return indices


def group_members(assignment: np.ndarray, n_groups: int) -> List[np.ndarray]:
    """Invert a point-to-node assignment into increasing member lists."""
    order = np.argsort(assignment, kind="stable")
    bounds = np.searchsorted(assignment[order], np.arange(n_groups + 1))
    return [order[bounds[g]:bounds[g + 1]] for g in range(n_groups)]


def rre(r_est: np.ndarray, r_gt: np.ndarray) -> float:
    """
    Relative rotation error in degrees.

    Geodesic angle arccos((trace(R_gt^T R_est) - 1) / 2). Below 90 degrees
    the same angle is taken from the chordal distance ||R_gt^T R_est - I||,
    which keeps full precision near zero.
    """
    relative = np.asarray(r_gt, dtype=np.float64).T @ np.asarray(r_est, dtype=np.float64)
    cosine = np.clip((np.trace(relative) - 1.0) / 2.0, -1.0, 1.0)
    if cosine > 0.0:
        chord = np.linalg.norm(relative - np.eye(3)) / (2.0 * np.sqrt(2.0))
        angle = 2.0 * np.arcsin(min(chord, 1.0))
    else:
        angle = np.arccos(cosine)
    return float(np.degrees(angle))


def rte(t_est: np.ndarray, t_gt: np.ndarray) -> float:
    """Relative translation error in meters."""
    return float(np.linalg.norm(np.asarray(t_est, dtype=np.float64) - np.asarray(t_gt, dtype=np.float64)))


class InlierRatio(NamedTuple):
    value: float
    empty: bool


def inlier_ratio(
    c: CorrespondenceSet,
    src: PointCloud,
    tgt: PointCloud,
    t_gt: RigidTransform,
    tau: float = DEFAULT_IR_THRESHOLD,
) -> InlierRatio:
    """
    Fraction of correspondences closer than `tau` under the true transform.

    An empty set yields value 0 with the `empty` flag raised.
    """
    if tau <= 0:
        raise GeometryError(f"inlier threshold must be > 0, got {tau}")
    if len(c) == 0:
        logger.warning("Inlier ratio requested for an empty correspondence set")
        return InlierRatio(0.0, True)
    if not c.within_bounds(len(src), len(tgt)):
        raise GeometryError("correspondence index out of bounds")

    residuals = correspondence_residuals(t_gt, c, src, tgt)
    return InlierRatio(float(np.mean(residuals < tau)), False)


def correspondence_residuals(
    t: RigidTransform, c: CorrespondenceSet, src: PointCloud, tgt: PointCloud
) -> np.ndarray:
    """||R p_i + t - q_j|| for every pair (i, j)."""
    moved = transform_points(t, src.points[c.source_indices])
    return np.linalg.norm(moved - tgt.points[c.target_indices], axis=1)


def registration_recall(
    results: List[RegistrationMetrics],
    rre_thresh: float = DEFAULT_RRE_THRESHOLD,
    rte_thresh: float = DEFAULT_RTE_THRESHOLD,
) -> float:
    """
    Fraction of results with RRE < rre_thresh and RTE < rte_thresh.

    Raises:
        EmptyInputError: If there are no results
    """
    if rre_thresh <= 0 or rte_thresh <= 0:
        raise GeometryError("recall thresholds must be > 0")
    if not results:
        raise EmptyInputError("no results")
    passed = sum(1 for r in results if r.rre < rre_thresh and r.rte < rte_thresh)
    return passed / len(results)


def evaluate_registration(
    t_est: RigidTransform,
    t_gt: RigidTransform,
    c: Optional[CorrespondenceSet],
    src: PointCloud,
    tgt: PointCloud,
    rre_thresh: float = DEFAULT_RRE_THRESHOLD,
    rte_thresh: float = DEFAULT_RTE_THRESHOLD,
    tau: float = DEFAULT_IR_THRESHOLD,
) -> RegistrationMetrics:
    """
    Compute RRE, RTE, success and IR for one registration.

    Args:
        t_est: Estimated transform
        t_gt: Ground-truth transform
        c: Dense correspondences the estimate was computed from
        src: Cloud the source indices refer to
        tgt: Cloud the target indices refer to
        rre_thresh: Recall rotation threshold (degrees)
        rte_thresh: Recall translation threshold (meters)
        tau: Inlier distance threshold (meters)

    Returns:
        RegistrationMetrics: The four metrics
    """
    rotation_error = rre(t_est.rotation, t_gt.rotation)
    translation_error = rte(t_est.translation, t_gt.translation)
    ratio = inlier_ratio(c if c is not None else CorrespondenceSet.empty(), src, tgt, t_gt, tau)
    return RegistrationMetrics(
        rre=min(rotation_error, 180.0),
        rte=translation_error,
        success=rotation_error < rre_thresh and translation_error < rte_thresh,
        ir=ratio.value,
        ir_empty=ratio.empty,
    )
