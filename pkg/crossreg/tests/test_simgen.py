"""Tests for ray casting, simulated sensors, degradation and pair generation."""

import numpy as np
import pytest

from conftest import small_dataset_config
from errors import SimulationError
from models import (
    Box,
    CameraIntrinsics,
    Cylinder,
    DegradationSpec,
    FanLidarSpec,
    PairConfig,
    Plane,
    PointCloud,
    RingLidarSpec,
    SceneModel,
)
from stages import core, simgen


GROUND = SceneModel(surfaces=[Plane()])


# ── Ray casting ─────────────────────────────────────────────────────────

class TestRaycast:

    def test_ray_down_hits_ground(self):
        hit = simgen.raycast(GROUND, [0.0, 0.0, 2.0], [0.0, 0.0, -1.0])
        assert hit is not None
        point, distance = hit
        assert distance == pytest.approx(2.0)
        np.testing.assert_allclose(point, [0.0, 0.0, 0.0], atol=1e-12)

    def test_ray_up_misses(self):
        assert simgen.raycast(GROUND, [0.0, 0.0, 2.0], [0.0, 0.0, 1.0]) is None

    def test_box_face(self):
        scene = SceneModel(surfaces=[Box(center=(5.0, 0.0, 1.0), size=(2.0, 2.0, 2.0))])
        point, distance = simgen.raycast(scene, [0.0, 0.0, 1.0], [1.0, 0.0, 0.0])
        assert distance == pytest.approx(4.0)
        np.testing.assert_allclose(point, [4.0, 0.0, 1.0], atol=1e-12)

    def test_cylinder_side(self):
        scene = SceneModel(surfaces=[Cylinder(center_xy=(5.0, 0.0), radius=1.0, z_min=0.0, z_max=3.0)])
        _, distance = simgen.raycast(scene, [0.0, 0.0, 1.0], [1.0, 0.0, 0.0])
        assert distance == pytest.approx(4.0)

    def test_cylinder_cap_from_above(self):
        scene = SceneModel(surfaces=[Cylinder(center_xy=(0.0, 0.0), radius=1.0, z_min=0.0, z_max=3.0)])
        _, distance = simgen.raycast(scene, [0.2, 0.0, 5.0], [0.0, 0.0, -1.0])
        assert distance == pytest.approx(2.0)

    def test_nearest_surface_wins(self):
        scene = SceneModel(surfaces=[
            Plane(),
            Box(center=(0.0, 0.0, 0.5), size=(1.0, 1.0, 1.0)),
        ])
        _, distance = simgen.raycast(scene, [0.0, 0.0, 3.0], [0.0, 0.0, -1.0])
        assert distance == pytest.approx(2.0)

    def test_max_range_turns_hit_into_miss(self):
        assert simgen.raycast(GROUND, [0.0, 0.0, 2.0], [0.0, 0.0, -1.0], max_range=1.5) is None

    def test_unnormalized_direction_rejected(self):
        with pytest.raises(SimulationError):
            simgen.raycast(GROUND, [0.0, 0.0, 2.0], [0.0, 0.0, -2.0])

    def test_batched_matches_single_rays(self, rng):
        directions = rng.normal(size=(50, 3))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        origin = np.array([0.0, 0.0, 1.5])
        hit, ranges = simgen.raycast_many(GROUND, origin, directions)
        for k in range(50):
            single = simgen.raycast(GROUND, origin, directions[k])
            assert hit[k] == (single is not None)
            if single is not None:
                assert ranges[k] == pytest.approx(single[1])


# ── Sensors ─────────────────────────────────────────────────────────────

class TestSensors:

    def test_ring_direction_count(self):
        spec = RingLidarSpec(beams=4, azimuth_resolution_deg=90.0)
        directions = simgen.ring_directions(spec)
        assert directions.shape == (16, 3)
        np.testing.assert_allclose(np.linalg.norm(directions, axis=1), 1.0, atol=1e-12)

    def test_partial_azimuth_span(self):
        spec = RingLidarSpec(beams=2, azimuth_resolution_deg=10.0, azimuth_span_deg=90.0)
        assert simgen.ring_directions(spec).shape == (18, 3)

    def test_empty_scene_gives_empty_scan(self):
        assert len(simgen.sample_ring_lidar(SceneModel(), RingLidarSpec(beams=4))) == 0

    def test_ring_hits_lie_on_ground(self):
        spec = RingLidarSpec(
            beams=8, elevation_min_deg=-20.0, elevation_max_deg=-5.0, azimuth_resolution_deg=5.0,
            pose=simgen.sensor_pose(0.0, 0.0, 2.0),
        )
        cloud = simgen.sample_ring_lidar(GROUND, spec)
        assert len(cloud) > 0
        assert np.max(np.abs(cloud.points[:, 2])) < 1e-9

    def test_fan_angles_stay_in_field_of_view(self):
        spec = FanLidarSpec(h_fov_deg=60.0, v_fov_deg=40.0, sample_count=2000)
        azimuth, elevation = simgen.fan_angles(spec)
        assert np.max(np.abs(azimuth)) <= 30.0 + 1e-9
        assert np.max(np.abs(elevation)) <= 20.0 + 1e-9

    def test_fan_pattern_does_not_repeat(self):
        azimuth, elevation = simgen.fan_angles(FanLidarSpec(sample_count=4000))
        samples = np.round(np.stack([azimuth, elevation], axis=1), 6)
        assert np.unique(samples, axis=0).shape[0] > 3900

    def test_fan_scan_faces_forward(self):
        spec = FanLidarSpec(sample_count=3000, pose=simgen.sensor_pose(0.0, 0.0, 1.5))
        cloud = simgen.sample_fan_lidar(GROUND, spec)
        assert len(cloud) > 0
        assert np.all(cloud.points[:, 0] > 0.0)


# ── Degradation ─────────────────────────────────────────────────────────

class TestDegrade:

    def test_no_degradation_is_identity(self, random_cloud):
        result = simgen.degrade(random_cloud, DegradationSpec())
        np.testing.assert_array_equal(result.points, random_cloud.points)

    def test_outlier_count(self, random_cloud):
        result = simgen.degrade(random_cloud, DegradationSpec(outlier_fraction=0.1, seed=3))
        changed = np.any(result.points != random_cloud.points, axis=1)
        assert changed.sum() == 50

    def test_outliers_inside_explicit_bounds(self, random_cloud):
        bounds = ((100.0, 100.0, 100.0), (101.0, 101.0, 101.0))
        result = simgen.degrade(random_cloud, DegradationSpec(outlier_fraction=0.2, outlier_bounds=bounds))
        moved = result.points[result.points[:, 0] >= 100.0]
        assert moved.shape[0] == 100
        assert np.all(moved <= 101.0)

    def test_dropout_keeps_order(self, random_cloud):
        result = simgen.degrade(random_cloud, DegradationSpec(dropout_fraction=0.5, seed=1))
        assert len(result) == 250
        # Survivors are a subsequence of the input
        index = core.KdIndex(random_cloud).nearest(result.points)[0]
        assert np.all(np.diff(index) > 0)

    def test_noise_scale(self, random_cloud):
        result = simgen.degrade(random_cloud, DegradationSpec(sigma=0.02, seed=5))
        residual = result.points - random_cloud.points
        assert residual.std() == pytest.approx(0.02, rel=0.1)

    def test_same_seed_same_output(self, random_cloud):
        spec = DegradationSpec(sigma=0.05, outlier_fraction=0.1, dropout_fraction=0.1, seed=11)
        first = simgen.degrade(random_cloud, spec)
        second = simgen.degrade(random_cloud, spec)
        np.testing.assert_array_equal(first.points, second.points)

    def test_empty_cloud_passes_through(self):
        assert len(simgen.degrade(PointCloud.empty(), DegradationSpec(sigma=1.0))) == 0


# ── Camera ──────────────────────────────────────────────────────────────

class TestViewImage:

    def test_empty_scene_renders_black(self):
        intrinsics = CameraIntrinsics.from_fov(80.0, 32, 24)
        image = simgen.render_view_image(SceneModel(), core.identity(), intrinsics, 24, 32)
        assert image.pixels.shape == (24, 32)
        assert image.pixels.max() == 0.0

    def test_ground_below_horizon_only(self):
        intrinsics = CameraIntrinsics.from_fov(80.0, 64, 48)
        pose = simgen.sensor_pose(0.0, 0.0, 2.0)
        image = simgen.render_view_image(GROUND, pose, intrinsics, 48, 64)
        assert image.pixels[0].max() == 0.0
        assert image.pixels[-1].min() > 0.0
        assert image.pixels.max() <= 1.0

    def test_too_small_image_rejected(self):
        intrinsics = CameraIntrinsics.from_fov(80.0, 4, 4)
        with pytest.raises(SimulationError):
            simgen.render_view_image(GROUND, core.identity(), intrinsics, 4, 4)


# ── Pairs ───────────────────────────────────────────────────────────────

def _ground_sensors():
    ring = RingLidarSpec(
        beams=64, elevation_min_deg=-30.0, elevation_max_deg=-2.0, azimuth_resolution_deg=1.0,
        pose=simgen.sensor_pose(0.0, 0.0, 1.9),
    )
    fan = FanLidarSpec(sample_count=2000, pose=simgen.sensor_pose(2.0, 1.0, 1.6, yaw_deg=30.0))
    return ring, fan


class TestMakePair:

    def test_gt_maps_source_into_target_frame(self):
        ring, fan = _ground_sensors()
        pair = simgen.make_pair(GROUND, ring, fan, DegradationSpec(), min_overlap=0.01, max_overlap=1.0)
        world = core.apply_transform(core.compose(ring.pose, pair.gt), pair.source)
        assert np.max(np.abs(world.points[:, 2])) < 1e-9
        target_world = core.apply_transform(ring.pose, pair.target)
        assert np.max(np.abs(target_world.points[:, 2])) < 1e-9

    def test_explicit_gt_is_kept(self, random_transform):
        ring, fan = _ground_sensors()
        pair = simgen.make_pair(GROUND, ring, fan, DegradationSpec(), gt=random_transform,
                                min_overlap=0.01, max_overlap=1.0)
        np.testing.assert_array_equal(pair.gt.rotation, random_transform.rotation)
        world = core.apply_transform(core.compose(ring.pose, pair.gt), pair.source)
        assert np.max(np.abs(world.points[:, 2])) < 1e-9

    def test_pair_carries_image_and_seeds(self):
        ring, fan = _ground_sensors()
        pair = simgen.make_pair(GROUND, ring, fan, DegradationSpec(), min_overlap=0.01, max_overlap=1.0, seed=9)
        assert pair.image is not None
        assert pair.seeds["pair"] == 9
        assert 0.01 <= pair.overlap <= 1.0

    def test_deterministic_under_seed(self):
        ring, fan = _ground_sensors()
        spec = DegradationSpec(sigma=0.02, outlier_fraction=0.1)
        first = simgen.make_pair(GROUND, ring, fan, spec, min_overlap=0.01, max_overlap=1.0, seed=4)
        second = simgen.make_pair(GROUND, ring, fan, spec, min_overlap=0.01, max_overlap=1.0, seed=4)
        np.testing.assert_array_equal(first.source.points, second.source.points)
        np.testing.assert_array_equal(first.target.points, second.target.points)
        np.testing.assert_array_equal(first.image.pixels, second.image.pixels)

    def test_unreachable_overlap(self):
        ring = RingLidarSpec(beams=1, elevation_min_deg=-10.0, elevation_max_deg=-10.0,
                             pose=simgen.sensor_pose(0.0, 0.0, 1.9))
        _, fan = _ground_sensors()
        with pytest.raises(SimulationError, match="overlap target unreachable"):
            simgen.make_pair(GROUND, ring, fan, DegradationSpec(), min_overlap=0.99, max_overlap=1.0,
                             pair=PairConfig(retries=2))

    def test_invalid_overlap_range(self):
        ring, fan = _ground_sensors()
        with pytest.raises(SimulationError):
            simgen.make_pair(GROUND, ring, fan, DegradationSpec(), min_overlap=0.8, max_overlap=0.5)


class TestScenesAndSuites:

    def test_random_scene_is_seeded(self):
        first = simgen.random_scene(5)
        second = simgen.random_scene(5)
        assert first == second
        assert len(first.surfaces) == 1 + 14 + 12

    def test_derive_seed_is_stable_and_distinct(self):
        assert simgen.derive_seed(1, 2, 3) == simgen.derive_seed(1, 2, 3)
        assert simgen.derive_seed(1, 2, 3) != simgen.derive_seed(1, 2, 4)

    def test_generate_suite(self):
        pairs = simgen.generate_suite(small_dataset_config(), 2)
        assert [pair.name for pair in pairs] == ["pair_000", "pair_001"]
        again = simgen.generate_suite(small_dataset_config(), 2)
        for a, b in zip(pairs, again):
            np.testing.assert_array_equal(a.source.points, b.source.points)
            np.testing.assert_array_equal(a.gt.translation, b.gt.translation)

    def test_seed_override_changes_output(self):
        first = simgen.generate_suite(small_dataset_config(), 1, seed=1)
        second = simgen.generate_suite(small_dataset_config(), 1, seed=2)
        assert first[0].seeds["pair"] != second[0].seeds["pair"]
