"""
Shared pytest fixtures.

Lives at the application root so that the flat imports used by the
application (`from models import ...`, `from stages import core`) resolve
when pytest is run from this directory.
"""

import numpy as np
import pytest

from models import DatasetConfig, FanLidarSpec, PairConfig, PointCloud, RigidTransform, RingLidarSpec, SceneConfig
from stages import core


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def random_cloud(rng) -> PointCloud:
    return PointCloud(points=rng.uniform(-5.0, 5.0, size=(500, 3)))


@pytest.fixture
def random_transform(rng) -> RigidTransform:
    return core.random_transform(rng)


def z_rotation(degrees: float, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
    """Rotation about +z, built from the closed-form matrix."""
    angle = np.radians(degrees)
    c, s = np.cos(angle), np.sin(angle)
    rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return RigidTransform(rotation=rotation, translation=translation)


def small_dataset_config(seed: int = 7) -> DatasetConfig:
    """Reduced sensors and scene so generated pairs stay fast to build and register."""
    return DatasetConfig(
        scene=SceneConfig(boxes=8, cylinders=6, outer_radius=20.0),
        ring=RingLidarSpec(beams=24, elevation_min_deg=-15.0, elevation_max_deg=10.0,
                           azimuth_resolution_deg=1.0, max_range=30.0),
        fan=FanLidarSpec(sample_count=5000, max_range=30.0),
        pair=PairConfig(min_overlap=0.1, max_overlap=1.0),
        seed=seed,
    )


def plane_cloud(rng: np.random.Generator, n: int = 6000, size: float = 16.0) -> PointCloud:
    """Horizontal patch with a box-shaped bump, enough structure for every pyramid level."""
    points = rng.uniform(0.0, size, size=(n, 3))
    points[:, 2] = 0.0
    bump = (points[:, 0] > size / 4) & (points[:, 0] < size / 2) & (points[:, 1] > size / 4) & (points[:, 1] < size / 2)
    points[bump, 2] = 1.5
    return PointCloud(points=points)
