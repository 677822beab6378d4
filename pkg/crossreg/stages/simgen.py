"""
Synthetic Scan Generation

Builds cross-source registration samples from parametric scenes: a spinning
ring lidar provides the target scan, a fan-shaped lidar with a rose scan
pattern provides the source scan, and a pinhole camera placed between the
two renders the unaligned view image.

Scans differ in density and structural pattern by construction; noise,
outliers and dropout are added by `degrade`.
"""

import logging
from typing import List, Optional, Tuple

import numpy as np

from errors import CrossRegError, SimulationError
from models import (
    Box,
    CameraConfig,
    CameraIntrinsics,
    Cylinder,
    DatasetConfig,
    DegradationSpec,
    FanLidarSpec,
    PairConfig,
    Plane,
    PointCloud,
    RigidTransform,
    RingLidarSpec,
    SceneConfig,
    SceneModel,
    ScenePair,
    ViewImage,
)
from stages import core

logger = logging.getLogger(__name__)

# Minimum ray parameter accepted as a hit
HIT_EPSILON = 1e-9
DIRECTION_TOLERANCE = 1e-9

# Role tags for seed derivation
_SOURCE_ROLE = 1
_TARGET_ROLE = 2
_CAMERA_ROLE = 3


def sensor_pose(x: float, y: float, z: float, yaw_deg: float = 0.0) -> RigidTransform:
    """Gravity-aligned sensor pose at (x, y, z) facing `yaw_deg` from +x."""
    return RigidTransform.from_axis_angle((0.0, 0.0, 1.0), yaw_deg, translation=(x, y, z))


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


# Ray casting
def _intersect_plane(surface: Plane, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    normal = np.asarray(surface.normal)
    denom = directions @ normal
    numer = (np.asarray(surface.point) - origins) @ normal
    with np.errstate(divide="ignore", invalid="ignore"):
        t = numer / denom
    return np.where(np.abs(denom) > 1e-12, t, np.inf)


def _intersect_box(surface: Box, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    center = np.asarray(surface.center)
    half = np.asarray(surface.size) / 2.0
    lo, hi = center - half, center + half

    parallel = directions == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origins) / directions
        t2 = (hi - origins) / directions
    inside_slab = (origins >= lo) & (origins <= hi)
    near = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    far = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = near.max(axis=1)
    t_far = far.min(axis=1)

    hit = (t_near <= t_far) & (t_far > HIT_EPSILON)
    t = np.where(t_near > HIT_EPSILON, t_near, t_far)
    return np.where(hit, t, np.inf)


def _intersect_cylinder(surface: Cylinder, origins: np.ndarray, directions: np.ndarray) -> np.ndarray:
    cx, cy = surface.center_xy
    ox, oy = origins[:, 0] - cx, origins[:, 1] - cy
    dx, dy = directions[:, 0], directions[:, 1]

    # Lateral surface
    a = dx * dx + dy * dy
    b = 2.0 * (ox * dx + oy * dy)
    c = ox * ox + oy * oy - surface.radius ** 2
    disc = b * b - 4.0 * a * c
    best = np.full(origins.shape[0], np.inf)
    valid = (a > 1e-18) & (disc >= 0.0)
    root = np.sqrt(np.where(valid, disc, 0.0))
    safe_a = np.where(valid, a, 1.0)
    for sign in (-1.0, 1.0):
        t = (-b + sign * root) / (2.0 * safe_a)
        z = origins[:, 2] + t * directions[:, 2]
        ok = valid & (t > HIT_EPSILON) & (z >= surface.z_min) & (z <= surface.z_max)
        best = np.where(ok & (t < best), t, best)

    # Caps
    dz = directions[:, 2]
    for cap in (surface.z_min, surface.z_max):
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (cap - origins[:, 2]) / dz
        px, py = ox + t * dx, oy + t * dy
        ok = (np.abs(dz) > 1e-18) & (t > HIT_EPSILON) & (px * px + py * py <= surface.radius ** 2)
        best = np.where(ok & (t < best), t, best)
    return best


_INTERSECTORS = {
    "plane": _intersect_plane,
    "box": _intersect_box,
    "cylinder": _intersect_cylinder,
}


def raycast_many(
    scene: SceneModel,
    origins: np.ndarray,
    directions: np.ndarray,
    max_range: float = np.inf,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Cast a batch of rays against every surface of the scene.

    Args:
        scene: Scene to intersect
        origins: (n, 3) or (3,) ray origins
        directions: (n, 3) unit directions
        max_range: Hits farther than this count as misses

    Returns:
        Tuple of (hit mask, ranges); ranges are inf for misses

    Raises:
        SimulationError: If any direction is not normalized
    """
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, 3)
    origins = np.broadcast_to(np.asarray(origins, dtype=np.float64), directions.shape)
    if directions.shape[0] and np.max(np.abs(np.linalg.norm(directions, axis=1) - 1.0)) > DIRECTION_TOLERANCE:
        raise SimulationError("ray direction is not normalized")

    ranges = np.full(directions.shape[0], np.inf)
    for surface in scene.surfaces:
        t = _INTERSECTORS[surface.kind](surface, origins, directions)
        ranges = np.minimum(ranges, np.where(t > HIT_EPSILON, t, np.inf))
    hit = ranges <= max_range
    return hit, np.where(hit, ranges, np.inf)


def raycast(
    scene: SceneModel,
    origin: np.ndarray,
    direction: np.ndarray,
    max_range: float = np.inf,
) -> Optional[Tuple[np.ndarray, float]]:
    """
    Nearest intersection of a single ray, or None.

    Returns:
        Tuple of (hit point, range) or None when nothing is hit within range
    """
    origin = np.asarray(origin, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    hit, ranges = raycast_many(scene, origin, direction.reshape(1, 3), max_range)
    if not hit[0]:
        return None
    return origin + ranges[0] * direction, float(ranges[0])


def _scan(scene: SceneModel, pose: RigidTransform, local_dirs: np.ndarray, max_range: float) -> PointCloud:
    if local_dirs.shape[0] == 0 or not scene.surfaces:
        return PointCloud.empty()
    directions = local_dirs @ pose.rotation.T
    hit, ranges = raycast_many(scene, pose.translation, directions, max_range)
    points = pose.translation + directions[hit] * ranges[hit, None]
    return PointCloud(points=points)


def _directions(azimuth_deg: np.ndarray, elevation_deg: np.ndarray) -> np.ndarray:
    az, el = np.radians(azimuth_deg), np.radians(elevation_deg)
    return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


# Sensors
def ring_directions(spec: RingLidarSpec) -> np.ndarray:
    """Sensor-frame ray directions of one sweep, azimuth-major firing order."""
    elevations = np.linspace(spec.elevation_min_deg, spec.elevation_max_deg, spec.beams)
    steps = max(1, int(np.floor(spec.azimuth_span_deg / spec.azimuth_resolution_deg + 1e-9)))
    azimuths = np.arange(steps) * spec.azimuth_resolution_deg
    az, el = np.meshgrid(azimuths, elevations, indexing="ij")
    return _directions(az.reshape(-1), el.reshape(-1))


def sample_ring_lidar(scene: SceneModel, spec: RingLidarSpec) -> PointCloud:
    """
    Simulate one sweep of a spinning multi-beam lidar.

    Returns:
        PointCloud: Hit points in scene coordinates, in firing order
    """
    cloud = _scan(scene, spec.pose, ring_directions(spec), spec.max_range)
    logger.debug(f"Ring sweep: {len(cloud)} hits")
    return cloud


def fan_angles(spec: FanLidarSpec) -> Tuple[np.ndarray, np.ndarray]:
    """
    Azimuth/elevation (degrees) of every fan sample.

    The pattern is a rose curve r = sin(k theta) in normalized angle space,
    stepped by `angular_rate_deg` per sample and rotated by `precession_deg`
    per sample so consecutive petals never retrace each other.
    """
    i = np.arange(spec.sample_count, dtype=np.float64)
    theta = np.radians(i * spec.angular_rate_deg)
    phase = theta + np.radians(i * spec.precession_deg)
    r = np.sin(spec.petals * theta)
    u, v = r * np.cos(phase), r * np.sin(phase)
    return u * spec.h_fov_deg / 2.0, v * spec.v_fov_deg / 2.0


def sample_fan_lidar(scene: SceneModel, spec: FanLidarSpec) -> PointCloud:
    """
    Simulate a fan-shaped lidar facing +x of its pose.

    Returns:
        PointCloud: Hit points in scene coordinates, in sample order
    """
    azimuth, elevation = fan_angles(spec)
    cloud = _scan(scene, spec.pose, _directions(azimuth, elevation), spec.max_range)
    logger.debug(f"Fan scan: {len(cloud)} hits from {spec.sample_count} samples")
    return cloud


def degrade(c: PointCloud, d: DegradationSpec) -> PointCloud:
    """
    Apply noise, then outliers, then dropout.

    Gaussian noise of std `sigma` perturbs every point; round(outlier_fraction * n)
    points are replaced by uniform samples in the outlier volume; round(dropout_fraction * n)
    points are removed with the survivors keeping their order.
    """
    n = len(c)
    if n == 0:
        return c
    rng = np.random.default_rng(d.seed)
    points = c.points.copy()
    intensity = None if c.intensity is None else c.intensity.copy()

    if d.sigma > 0:
        points += rng.normal(0.0, d.sigma, size=points.shape)

    outliers = int(round(d.outlier_fraction * n))
    if outliers:
        if d.outlier_bounds is None:
            lo, hi = c.points.min(axis=0), c.points.max(axis=0)
        else:
            lo, hi = np.asarray(d.outlier_bounds[0]), np.asarray(d.outlier_bounds[1])
        replaced = rng.choice(n, size=outliers, replace=False)
        points[replaced] = rng.uniform(lo, hi, size=(outliers, 3))

    dropped = int(round(d.dropout_fraction * n))
    keep = np.ones(n, dtype=bool)
    if dropped:
        keep[rng.choice(n, size=dropped, replace=False)] = False

    return PointCloud(points=points[keep], intensity=None if intensity is None else intensity[keep])


# Camera
def render_view_image(
    scene: SceneModel,
    camera_pose: RigidTransform,
    intrinsics: CameraIntrinsics,
    height: int,
    width: int,
    max_range: float = 40.0,
) -> ViewImage:
    """
    Render normalized inverse depth from a pinhole camera facing +x of its pose.

    A pixel at depth r along the optical axis gets
    (1/(1+r) - 1/(1+R)) / (1 - 1/(1+R)) with R = max_range: 1 at the
    camera, 0 at max range and for rays that hit nothing.
    """
    if height < 8 or width < 8:
        raise SimulationError(f"image must be at least 8x8, got {height}x{width}")

    rows, cols = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    local = np.stack(
        [
            np.ones_like(rows),
            -(cols - intrinsics.cx) / intrinsics.fx,
            -(rows - intrinsics.cy) / intrinsics.fy,
        ],
        axis=-1,
    ).reshape(-1, 3)
    local /= np.linalg.norm(local, axis=1, keepdims=True)

    pixels = np.zeros(height * width)
    if scene.surfaces:
        directions = local @ camera_pose.rotation.T
        # Range limit applies to depth, not to slant range
        hit, ranges = raycast_many(scene, camera_pose.translation, directions)
        depth = np.where(hit, ranges * local[:, 0], np.inf)
        visible = depth <= max_range
        far = 1.0 / (1.0 + max_range)
        pixels[visible] = (1.0 / (1.0 + depth[visible]) - far) / (1.0 - far)
    return ViewImage(pixels=np.clip(pixels, 0.0, 1.0).reshape(height, width))


# Pairs
def estimate_overlap(source_world: PointCloud, target_world: PointCloud, radius: float) -> float:
    """Fraction of source points with a target point within `radius`."""
    if len(source_world) == 0 or len(target_world) == 0:
        return 0.0
    return float(np.mean(core.KdIndex(target_world).within(source_world.points, radius)))


def _jitter_pose(pose: RigidTransform, rng: np.random.Generator, pair: PairConfig) -> RigidTransform:
    yaw = rng.uniform(-pair.jitter_yaw_deg, pair.jitter_yaw_deg)
    shift = np.append(rng.uniform(-pair.jitter_position, pair.jitter_position, size=2), 0.0)
    turn = RigidTransform.from_axis_angle((0.0, 0.0, 1.0), yaw)
    return RigidTransform(rotation=turn.rotation @ pose.rotation, translation=pose.translation + shift)


def _camera_pose(ring_pose: RigidTransform, fan_pose: RigidTransform, rng: np.random.Generator,
                 camera: CameraConfig) -> RigidTransform:
    midpoint = (ring_pose.translation + fan_pose.translation) / 2.0
    midpoint[:2] += rng.uniform(-camera.position_jitter, camera.position_jitter, size=2)
    heading = fan_pose.rotation @ np.array([1.0, 0.0, 0.0])
    yaw = np.degrees(np.arctan2(heading[1], heading[0]))
    yaw += rng.uniform(-camera.yaw_jitter_deg, camera.yaw_jitter_deg)
    return sensor_pose(midpoint[0], midpoint[1], midpoint[2], yaw)


def make_pair(
    scene: SceneModel,
    ring: RingLidarSpec,
    fan: FanLidarSpec,
    degradation: DegradationSpec,
    gt: Optional[RigidTransform] = None,
    min_overlap: float = 0.4,
    max_overlap: float = 0.9,
    camera: Optional[CameraConfig] = None,
    pair: Optional[PairConfig] = None,
    seed: int = 0,
    name: str = "pair",
) -> ScenePair:
    """
    Scan a scene with both sensors and package a registration sample.

    The target is the ring scan in the ring sensor frame. The source is the fan
    scan expressed in a frame such that `gt` maps it exactly onto the target
    frame; without `gt` the fan sensor frame is used and gt follows from the
    sensor poses. Overlap is measured on the clean scans; when it misses the
    target range the fan pose is re-jittered up to `pair.retries` times.

    Raises:
        SimulationError: "overlap target unreachable" when every attempt misses
    """
    if not (0.0 < min_overlap <= max_overlap <= 1.0):
        raise SimulationError(f"invalid overlap target range ({min_overlap}, {max_overlap})")
    camera = camera or CameraConfig()
    pair = pair or PairConfig()

    target_world = sample_ring_lidar(scene, ring)
    to_target = core.inverse(ring.pose)

    fan_pose = fan.pose
    for attempt in range(pair.retries + 1):
        if attempt:
            fan_pose = _jitter_pose(fan.pose, np.random.default_rng([seed, attempt]), pair)
        source_world = sample_fan_lidar(scene, fan.model_copy(update={"pose": fan_pose}))
        overlap = estimate_overlap(source_world, target_world, pair.overlap_radius)
        if min_overlap <= overlap <= max_overlap:
            break
        logger.debug(f"{name}: attempt {attempt} overlap {overlap:.3f} outside target range")
    else:
        raise SimulationError("overlap target unreachable")

    pair_gt = gt if gt is not None else core.compose(to_target, fan_pose)
    to_source = core.inverse(core.compose(ring.pose, pair_gt))

    source_seed = derive_seed(degradation.seed, seed, _SOURCE_ROLE)
    target_seed = derive_seed(degradation.seed, seed, _TARGET_ROLE)
    source = degrade(core.apply_transform(to_source, source_world), degradation.model_copy(update={"seed": source_seed}))
    target = degrade(core.apply_transform(to_target, target_world), degradation.model_copy(update={"seed": target_seed}))

    camera_rng = np.random.default_rng([seed, attempt, _CAMERA_ROLE])
    intrinsics = CameraIntrinsics.from_fov(camera.h_fov_deg, camera.width, camera.height)
    image = render_view_image(
        scene, _camera_pose(ring.pose, fan_pose, camera_rng, camera),
        intrinsics, camera.height, camera.width, camera.max_range,
    )

    logger.info(f"{name}: {len(source)} source / {len(target)} target points, overlap {overlap:.3f}")
    return ScenePair(
        source=source,
        target=target,
        image=image,
        gt=pair_gt,
        overlap=overlap,
        seeds={
            "scene": scene.seed,
            "pair": seed,
            "attempt": attempt,
            "source_degradation": source_seed,
            "target_degradation": target_seed,
        },
        name=name,
    )


def random_scene(seed: int, cfg: Optional[SceneConfig] = None) -> SceneModel:
    """
    Procedural outdoor scene: a ground plane, boxes (buildings, vehicles)
    and vertical cylinders (poles, trunks) scattered over an annulus
    around the origin.
    """
    cfg = cfg or SceneConfig()
    rng = np.random.default_rng(seed)
    surfaces: List = [Plane(point=(0.0, 0.0, 0.0), normal=(0.0, 0.0, 1.0))]

    def place() -> Tuple[float, float]:
        radius = rng.uniform(cfg.inner_radius, cfg.outer_radius)
        angle = rng.uniform(0.0, 2.0 * np.pi)
        return radius * np.cos(angle), radius * np.sin(angle)

    for _ in range(cfg.boxes):
        x, y = place()
        sx, sy = rng.uniform(cfg.box_size_min, cfg.box_size_max, size=2)
        height = rng.uniform(cfg.box_height_min, cfg.box_height_max)
        surfaces.append(Box(center=(x, y, height / 2.0), size=(sx, sy, height)))
    for _ in range(cfg.cylinders):
        x, y = place()
        radius = rng.uniform(cfg.cylinder_radius_min, cfg.cylinder_radius_max)
        height = rng.uniform(cfg.cylinder_height_min, cfg.cylinder_height_max)
        surfaces.append(Cylinder(center_xy=(x, y), radius=radius, z_min=0.0, z_max=height))
    return SceneModel(surfaces=surfaces, seed=seed)


def _random_fan_pose(rng: np.random.Generator, pair: PairConfig) -> RigidTransform:
    distance = rng.uniform(0.0, pair.fan_offset_max)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    yaw = rng.uniform(-pair.fan_heading_max_deg, pair.fan_heading_max_deg)
    return sensor_pose(distance * np.cos(angle), distance * np.sin(angle), pair.fan_height, yaw)


def generate_suite(config: DatasetConfig, count: int, seed: Optional[int] = None) -> List[ScenePair]:
    """
    Generate `count` pairs, each from its own scene and generator state.

    Raises:
        SimulationError: If a pair cannot reach the overlap target in any of
            `pair.scene_attempts` scenes
    """
    seed = config.seed if seed is None else seed
    ring = config.ring.model_copy(update={"pose": sensor_pose(0.0, 0.0, config.pair.ring_height)})
    pairs = []
    for k in range(count):
        name = f"pair_{k:03d}"
        last_error: Optional[CrossRegError] = None
        for scene_attempt in range(config.pair.scene_attempts):
            pair_seed = derive_seed(seed, k, scene_attempt)
            rng = np.random.default_rng(pair_seed)
            scene = random_scene(int(rng.integers(2 ** 31)), config.scene)
            fan = config.fan.model_copy(update={"pose": _random_fan_pose(rng, config.pair)})
            try:
                pairs.append(make_pair(
                    scene, ring, fan, config.degradation,
                    min_overlap=config.pair.min_overlap,
                    max_overlap=config.pair.max_overlap,
                    camera=config.camera,
                    pair=config.pair,
                    seed=pair_seed,
                    name=name,
                ))
                break
            except SimulationError as e:
                last_error = e
                logger.warning(f"{name}: scene attempt {scene_attempt} rejected: {e}")
        else:
            raise SimulationError(f"{name}: {last_error}")
    return pairs
