"""
Crossreg Data Models

This module contains the data models used throughout the registration toolkit.
It includes pydantic models for domain objects and configuration validation,
and SQLAlchemy models for the optional results store.

Array-carrying models hold float64/int64 numpy arrays; the validators coerce
inputs and enforce the invariants documented on each model.
"""

from enum import Enum
from typing import Annotated, Any, ClassVar, Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from sqlalchemy import Boolean, Column, DateTime, Float, Integer, JSON, String, Text
from sqlalchemy.orm import declarative_base
from sqlalchemy.sql import func

# SQLAlchemy Base
Base = declarative_base()

TOOL_VERSION = "1.0.0"

# Orthonormality / determinant tolerance for rotations
ROTATION_TOLERANCE = 1e-9

# Feature rows are unit length within this tolerance
FEATURE_NORM_TOLERANCE = 1e-6


# Enums
class Granularity(str, Enum):
    """Granularity of a correspondence set."""
    SUPERPOINT = "superpoint"
    DENSE = "dense"


class EstimatorVariant(str, Enum):
    """Pose estimators available to the pipeline."""
    WEIGHTED_SVD = "weighted_svd"
    RANSAC = "ransac"
    LGR = "lgr"


class AttentionMode(str, Enum):
    """Superpoint feature enhancement variants (ablation axis)."""
    VANILLA_SELF = "vanilla_self"
    GEO_SELF = "geo_self"
    VGAM_FULL = "vgam_full"


class MaskSource(str, Enum):
    """Where the overlap masks come from."""
    PREDICTED = "predicted"
    GROUND_TRUTH = "ground_truth"


class ArrayModel(BaseModel):
    """Base for models that carry numpy arrays."""
    model_config = ConfigDict(arbitrary_types_allowed=True, protected_namespaces=())


def _as_matrix(value: Any, columns: int, name: str) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64)
    if array.size == 0:
        return array.reshape(0, columns)
    if array.ndim != 2 or array.shape[1] != columns:
        raise ValueError(f"{name} must have shape (n, {columns}), got {array.shape}")
    return array


# Core geometry
class PointCloud(ArrayModel):
    """
    Ordered set of 3D points; row index is the point identity.

    Attributes:
        points: (n, 3) coordinates in meters
        intensity: Optional per-point scalar attribute
    """
    points: np.ndarray
    intensity: Optional[np.ndarray] = None

    @field_validator("points", mode="before")
    @classmethod
    def _coerce_points(cls, value: Any) -> np.ndarray:
        points = _as_matrix(value, 3, "points")
        if not np.all(np.isfinite(points)):
            raise ValueError("point coordinates must be finite")
        return points

    @field_validator("intensity", mode="before")
    @classmethod
    def _coerce_intensity(cls, value: Any) -> Optional[np.ndarray]:
        if value is None:
            return None
        return np.asarray(value, dtype=np.float64).reshape(-1)

    @model_validator(mode="after")
    def _check_intensity_length(self) -> "PointCloud":
        if self.intensity is not None and self.intensity.shape[0] != self.points.shape[0]:
            raise ValueError("intensity length must match point count")
        return self

    def __len__(self) -> int:
        return int(self.points.shape[0])

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(points=np.zeros((0, 3)))

    def subset(self, indices: np.ndarray) -> "PointCloud":
        """Return the points at `indices`, in that order."""
        indices = np.asarray(indices, dtype=np.int64)
        intensity = None if self.intensity is None else self.intensity[indices]
        return PointCloud(points=self.points[indices], intensity=intensity)


class RigidTransform(ArrayModel):
    """
    Rigid motion x -> R x + t.

    Attributes:
        rotation: 3x3 rotation matrix, R^T R = I and det R = +1 within 1e-9
        translation: 3-vector in meters
    """
    rotation: np.ndarray
    translation: np.ndarray

    @field_validator("rotation", mode="before")
    @classmethod
    def _check_rotation(cls, value: Any) -> np.ndarray:
        rotation = np.asarray(value, dtype=np.float64)
        if rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {rotation.shape}")
        if not np.all(np.isfinite(rotation)):
            raise ValueError("rotation must be finite")
        if np.max(np.abs(rotation.T @ rotation - np.eye(3))) >= ROTATION_TOLERANCE:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) >= ROTATION_TOLERANCE:
            raise ValueError("rotation determinant is not +1")
        return rotation

    @field_validator("translation", mode="before")
    @classmethod
    def _check_translation(cls, value: Any) -> np.ndarray:
        translation = np.asarray(value, dtype=np.float64).reshape(-1)
        if translation.shape != (3,) or not np.all(np.isfinite(translation)):
            raise ValueError("translation must be a finite 3-vector")
        return translation

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(rotation=np.eye(3), translation=np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "RigidTransform":
        """Build from a 4x4 homogeneous (or 3x4) matrix."""
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(rotation=matrix[:3, :3], translation=matrix[:3, 3])

    @classmethod
    def from_axis_angle(
        cls,
        axis: Tuple[float, float, float],
        degrees: float,
        translation: Tuple[float, float, float] = (0.0, 0.0, 0.0),
    ) -> "RigidTransform":
        from scipy.spatial.transform import Rotation

        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        rotation = Rotation.from_rotvec(axis * np.radians(degrees)).as_matrix()
        return cls(rotation=rotation, translation=translation)

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix


class CorrespondenceSet(ArrayModel):
    """
    Index pairs between a source and a target cloud.

    Attributes:
        pairs: (k, 2) int64 array of (source index, target index)
        confidence: (k,) non-negative finite scores, defaults to 1
        granularity: Superpoint (C') or dense (C*) level
    """
    pairs: np.ndarray
    confidence: Optional[np.ndarray] = None
    granularity: Granularity = Granularity.DENSE

    @field_validator("pairs", mode="before")
    @classmethod
    def _coerce_pairs(cls, value: Any) -> np.ndarray:
        pairs = np.asarray(value, dtype=np.int64)
        if pairs.size == 0:
            return pairs.reshape(0, 2)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise ValueError(f"pairs must have shape (k, 2), got {pairs.shape}")
        if np.any(pairs < 0):
            raise ValueError("pair indices must be non-negative")
        return pairs

    @model_validator(mode="after")
    def _check_confidence(self) -> "CorrespondenceSet":
        if self.confidence is None:
            self.confidence = np.ones(self.pairs.shape[0])
        else:
            self.confidence = np.asarray(self.confidence, dtype=np.float64).reshape(-1)
        if self.confidence.shape[0] != self.pairs.shape[0]:
            raise ValueError("confidence length must match pair count")
        if not np.all(np.isfinite(self.confidence)) or np.any(self.confidence < 0):
            raise ValueError("confidences must be finite and non-negative")
        return self

    def __len__(self) -> int:
        return int(self.pairs.shape[0])

    @classmethod
    def empty(cls, granularity: Granularity = Granularity.DENSE) -> "CorrespondenceSet":
        return cls(pairs=np.zeros((0, 2), dtype=np.int64), granularity=granularity)

    @property
    def source_indices(self) -> np.ndarray:
        return self.pairs[:, 0]

    @property
    def target_indices(self) -> np.ndarray:
        return self.pairs[:, 1]

    def within_bounds(self, n_source: int, n_target: int) -> bool:
        if len(self) == 0:
            return True
        return bool(self.pairs[:, 0].max() < n_source and self.pairs[:, 1].max() < n_target)


class RegistrationMetrics(BaseModel):
    """
    Evaluation of one registration against ground truth.

    Attributes:
        rre: Relative rotation error in degrees
        rte: Relative translation error in meters
        success: RRE and RTE both under the recall thresholds
        ir: Inlier ratio of the dense correspondences
        ir_empty: The correspondence set was empty (IR defined as 0)
    """
    rre: float = Field(..., ge=0.0, le=180.0, description="Relative rotation error (deg)")
    rte: float = Field(..., ge=0.0, description="Relative translation error (m)")
    success: bool = Field(..., description="Counted towards registration recall")
    ir: float = Field(..., ge=0.0, le=1.0, description="Inlier ratio")
    ir_empty: bool = Field(default=False, description="IR computed on an empty set")


# Scan simulation
Vector3 = Tuple[float, float, float]


class Plane(BaseModel):
    """Infinite plane through `point` with unit `normal`."""
    kind: Literal["plane"] = "plane"
    point: Vector3 = (0.0, 0.0, 0.0)
    normal: Vector3 = (0.0, 0.0, 1.0)

    @field_validator("normal")
    @classmethod
    def _normalize(cls, value: Vector3) -> Vector3:
        norm = float(np.linalg.norm(value))
        if norm <= 0.0:
            raise ValueError("plane normal must be non-zero")
        return tuple(float(v) / norm for v in value)


class Box(BaseModel):
    """Axis-aligned box given by its center and full side lengths."""
    kind: Literal["box"] = "box"
    center: Vector3
    size: Vector3

    @field_validator("size")
    @classmethod
    def _positive(cls, value: Vector3) -> Vector3:
        if min(value) <= 0:
            raise ValueError("box extents must be > 0")
        return value


class Cylinder(BaseModel):
    """Vertical capped cylinder."""
    kind: Literal["cylinder"] = "cylinder"
    center_xy: Tuple[float, float]
    radius: float = Field(..., gt=0.0)
    z_min: float
    z_max: float

    @model_validator(mode="after")
    def _check_height(self) -> "Cylinder":
        if self.z_max <= self.z_min:
            raise ValueError("cylinder height must be > 0")
        return self


Surface = Annotated[Union[Plane, Box, Cylinder], Field(discriminator="kind")]


class SceneModel(BaseModel):
    """
    Parametric scene to scan.

    The surface list may be empty (an empty scene yields empty scans).
    """
    surfaces: List[Surface] = Field(default_factory=list)
    seed: int = 0


class RingLidarSpec(BaseModel):
    """Spinning multi-beam lidar producing ring-structured scans."""
    beams: int = Field(default=64, ge=1, description="Number of laser beams")
    elevation_min_deg: float = Field(default=-22.5, ge=-90.0, le=90.0)
    elevation_max_deg: float = Field(default=22.5, ge=-90.0, le=90.0)
    azimuth_resolution_deg: float = Field(default=0.4, gt=0.0, le=90.0)
    azimuth_span_deg: float = Field(default=360.0, gt=0.0, le=360.0)
    max_range: float = Field(default=40.0, gt=0.0, description="Maximum range (m)")
    pose: RigidTransform = Field(default_factory=RigidTransform.identity)

    @model_validator(mode="after")
    def _check_elevations(self) -> "RingLidarSpec":
        if self.elevation_max_deg < self.elevation_min_deg:
            raise ValueError("elevation_max_deg must be >= elevation_min_deg")
        return self


class FanLidarSpec(BaseModel):
    """Semi-solid-state lidar with a non-repetitive rose scan pattern."""
    h_fov_deg: float = Field(default=70.0, gt=0.0, lt=180.0)
    v_fov_deg: float = Field(default=70.0, gt=0.0, lt=180.0)
    petals: int = Field(default=5, ge=1, description="Rose curve frequency k")
    angular_rate_deg: float = Field(default=137.50776, gt=0.0, description="Pattern phase step per sample")
    precession_deg: float = Field(default=0.0137, ge=0.0, description="Pattern rotation per sample")
    sample_count: int = Field(default=24000, ge=0)
    max_range: float = Field(default=40.0, gt=0.0)
    pose: RigidTransform = Field(default_factory=RigidTransform.identity)


class DegradationSpec(BaseModel):
    """Noise, outlier and dropout model applied to a clean scan."""
    sigma: float = Field(default=0.0, ge=0.0, description="Gaussian noise std (m)")
    outlier_fraction: float = Field(default=0.0, ge=0.0, le=1.0)
    outlier_bounds: Optional[Tuple[Vector3, Vector3]] = Field(
        default=None, description="(min corner, max corner); defaults to the cloud bounds"
    )
    dropout_fraction: float = Field(default=0.0, ge=0.0, le=1.0)
    seed: int = 0


class CameraIntrinsics(BaseModel):
    """Pinhole intrinsics in pixels."""
    fx: float = Field(..., gt=0.0)
    fy: float = Field(..., gt=0.0)
    cx: float
    cy: float

    @classmethod
    def from_fov(cls, h_fov_deg: float, width: int, height: int) -> "CameraIntrinsics":
        focal = (width / 2.0) / np.tan(np.radians(h_fov_deg) / 2.0)
        return cls(fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0)


class ViewImage(ArrayModel):
    """
    Single-channel view of the scene, values in [0, 1].

    The camera pose used for rendering is deliberately not stored.
    """
    pixels: np.ndarray

    @field_validator("pixels", mode="before")
    @classmethod
    def _check_pixels(cls, value: Any) -> np.ndarray:
        pixels = np.asarray(value, dtype=np.float64)
        if pixels.ndim != 2 or pixels.shape[0] < 8 or pixels.shape[1] < 8:
            raise ValueError(f"image must be at least 8x8, got {pixels.shape}")
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0.0 or pixels.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        return pixels

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])


class ScenePair(ArrayModel):
    """
    One cross-source registration sample.

    Attributes:
        source: Fan-lidar scan in its own frame
        target: Ring-lidar scan in its own frame
        image: Unaligned view image
        gt: Transform mapping source coordinates into the target frame
        overlap: Estimated overlap fraction of the source
        seeds: Seeds that reproduce this pair
    """
    source: PointCloud
    target: PointCloud
    image: Optional[ViewImage] = None
    gt: RigidTransform
    overlap: float = Field(..., ge=0.0, le=1.0)
    seeds: Dict[str, int] = Field(default_factory=dict)
    name: str = "pair"


# Feature encoding
class EncoderConfig(BaseModel):
    """Handcrafted encoder settings."""
    voxel_sizes: List[float] = Field(default_factory=lambda: [0.25, 0.5, 1.0, 2.0])
    descriptor_radii: List[float] = Field(default_factory=lambda: [0.5, 1.0, 2.0])
    dense_dim: int = Field(default=32, ge=8, description="d', dense feature dim")
    super_dim: int = Field(default=64, ge=8, description="d^, superpoint feature dim")
    image_scales: List[int] = Field(default_factory=lambda: [1, 3, 7, 15])
    image_dim: int = Field(default=64, ge=8, description="d, unified image feature dim")
    height_scale: float = Field(default=5.0, gt=0.0, description="Height normalization (m)")
    ground_percentile: float = Field(default=5.0, ge=0.0, le=50.0)
    min_points: int = Field(default=16, ge=1)
    context_radius: float = Field(default=6.0, gt=0.0, description="Horizontal reach of the superpoint context (m)")
    context_rings: int = Field(default=4, ge=1, description="Radial bins of the superpoint context")
    context_heights: List[float] = Field(
        default_factory=lambda: [0.5, 1.5, 2.5, 3.5, 5.0],
        description="Lower edges of the height bins above ground (m); the last bin is open",
    )
    context_weight: float = Field(default=1.5, ge=0.0, description="Weight of the context against pooled descriptors")
    ground_clearance: float = Field(default=0.5, gt=0.0, description="Height below which points count as ground (m)")
    min_support: int = Field(default=8, ge=1, description="Dense points a salient superpoint needs")

    @property
    def superpoint_raw_dim(self) -> int:
        """Pooled mean and max descriptors plus the context histogram."""
        return 2 * 6 * len(self.descriptor_radii) + self.context_rings * len(self.context_heights)

    @model_validator(mode="after")
    def _check_layout(self) -> "EncoderConfig":
        if len(self.voxel_sizes) < 2:
            raise ValueError("need at least two pyramid levels")
        if any(b <= a for a, b in zip(self.voxel_sizes, self.voxel_sizes[1:])) or self.voxel_sizes[0] <= 0:
            raise ValueError("voxel sizes must be positive and strictly increasing")
        if not self.descriptor_radii or min(self.descriptor_radii) <= 0:
            raise ValueError("descriptor radii must be positive")
        if 6 * len(self.descriptor_radii) > self.dense_dim:
            raise ValueError("dense_dim must hold 6 channels per descriptor radius")
        if not self.context_heights or any(b <= a for a, b in zip(self.context_heights, self.context_heights[1:])):
            raise ValueError("context heights must be strictly increasing")
        if self.superpoint_raw_dim > self.super_dim:
            raise ValueError(f"super_dim must hold {self.superpoint_raw_dim} pooled and context channels")
        if not self.image_scales or min(self.image_scales) < 1:
            raise ValueError("image scales must be >= 1")
        if 3 * len(self.image_scales) + 1 > self.image_dim:
            raise ValueError("image_dim must hold 3 channels per scale plus a bias channel")
        return self


class FeatureLevel(ArrayModel):
    """
    One pyramid level.

    Attributes:
        cloud: Level points
        features: (n, dim) L2-normalized rows
        voxel_size: Voxel size that produced this level
        parent: Index of the nearest point in the next coarser level (None at the top)
    """
    cloud: PointCloud
    features: np.ndarray
    voxel_size: float
    parent: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def _check_features(self) -> "FeatureLevel":
        if self.features.shape[0] != len(self.cloud):
            raise ValueError("one feature row per point required")
        norms = np.linalg.norm(self.features, axis=1)
        if norms.size and np.max(np.abs(norms - 1.0)) > FEATURE_NORM_TOLERANCE:
            raise ValueError("feature rows must be unit length")
        return self


class FeaturePyramid(ArrayModel):
    """
    Levels ordered dense (index 0) to superpoints (last).

    `salient` flags superpoints with enough elevated structure below them to
    be told apart; None when the encoder did not compute it.
    """
    levels: List[FeatureLevel]
    salient: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def _check_counts(self) -> "FeaturePyramid":
        counts = [len(level.cloud) for level in self.levels]
        if any(b >= a for a, b in zip(counts, counts[1:])):
            raise ValueError(f"level point counts must strictly decrease, got {counts}")
        if self.salient is not None and self.salient.shape != (counts[-1],):
            raise ValueError("one salient flag per superpoint required")
        return self

    @property
    def dense(self) -> FeatureLevel:
        return self.levels[0]

    @property
    def superpoints(self) -> FeatureLevel:
        return self.levels[-1]


class ImageFeatureGrid(ArrayModel):
    """
    Per-pixel image features.

    Attributes:
        features: (H, W, d) feature volume
        coords: (H, W, 2) pixel (row, col) coordinates
    """
    features: np.ndarray
    coords: np.ndarray

    def flattened(self) -> Tuple[np.ndarray, np.ndarray]:
        """Return (H*W, d) features and (H*W, 2) coordinates in row-major order."""
        dim = self.features.shape[2]
        return self.features.reshape(-1, dim), self.coords.reshape(-1, 2)


# Overlapping mask predictor
class OmpConfig(BaseModel):
    """Overlap mask predictor settings."""
    threshold: float = Field(default=0.5, gt=0.0, lt=1.0, description="Confidence threshold lambda")
    heads: int = Field(default=4, ge=1)
    gt_radius: float = Field(default=0.5, gt=0.0, description="GT correspondence radius (m)")
    unified_dim: int = Field(default=64, ge=8)
    mlp_hidden: int = Field(default=32, ge=1)
    mask_source: MaskSource = MaskSource.PREDICTED
    share_weights: bool = True
    weights_path: Optional[str] = None
    target_weights_path: Optional[str] = None


class OmpWeights(ArrayModel):
    """Parameters of the overlap mask predictor (one cloud branch)."""
    img_proj: np.ndarray
    img_bias: np.ndarray
    sup_proj: np.ndarray
    sup_bias: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    ffn_w1: np.ndarray
    ffn_b1: np.ndarray
    ffn_w2: np.ndarray
    ffn_b2: np.ndarray
    mlp_w1: np.ndarray
    mlp_b1: np.ndarray
    mlp_w2: np.ndarray
    mlp_b2: np.ndarray
    heads: int = Field(default=4, ge=1)

    ARRAY_ORDER: ClassVar[Tuple[str, ...]] = (
        "img_proj", "img_bias", "sup_proj", "sup_bias", "wq", "wk", "wv", "wo",
        "ln_gamma", "ln_beta", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2",
        "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2",
    )

    @model_validator(mode="after")
    def _check_shapes(self) -> "OmpWeights":
        for name in self.ARRAY_ORDER:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} must be finite")
        image_dim, super_dim, unified, hidden = self.dims()
        expected = OmpWeights.shapes(image_dim, super_dim, unified, hidden)
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        return self

    def dims(self) -> Tuple[int, int, int, int]:
        """(image dim d, superpoint dim d^, unified dim, MLP hidden dim)."""
        return (
            int(self.img_proj.shape[0]),
            int(self.sup_proj.shape[0]),
            int(self.img_proj.shape[1]),
            int(self.mlp_w1.shape[1]),
        )

    @staticmethod
    def shapes(image_dim: int, super_dim: int, unified: int, hidden: int) -> Dict[str, Tuple[int, ...]]:
        return {
            "img_proj": (image_dim, unified), "img_bias": (unified,),
            "sup_proj": (super_dim, unified), "sup_bias": (unified,),
            "wq": (unified, unified), "wk": (unified, unified),
            "wv": (unified, unified), "wo": (unified, unified),
            "ln_gamma": (unified,), "ln_beta": (unified,),
            "ffn_w1": (unified, 2 * unified), "ffn_b1": (2 * unified,),
            "ffn_w2": (2 * unified, unified), "ffn_b2": (unified,),
            "mlp_w1": (unified, hidden), "mlp_b1": (hidden,),
            "mlp_w2": (hidden,), "mlp_b2": (1,),
        }


class OverlapProbabilities(ArrayModel):
    """Per-superpoint overlap probability in [0, 1]."""
    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def _check_values(cls, value: Any) -> np.ndarray:
        values = np.asarray(value, dtype=np.float64).reshape(-1)
        if np.any(~np.isfinite(values)) or np.any(values < 0.0) or np.any(values > 1.0):
            raise ValueError("probabilities must lie in [0, 1]")
        return values

    def __len__(self) -> int:
        return int(self.values.shape[0])


class OverlapMask(ArrayModel):
    """Per-superpoint binary overlap mask."""
    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def _check_binary(cls, value: Any) -> np.ndarray:
        values = np.asarray(value).reshape(-1)
        if values.dtype != bool:
            if np.any((values != 0) & (values != 1)):
                raise ValueError("mask must be binary")
            values = values.astype(bool)
        return values

    def __len__(self) -> int:
        return int(self.values.shape[0])

    @property
    def fraction(self) -> float:
        return float(self.values.mean()) if len(self) else 0.0


# Visual-geometric attention guided matching
class VgamConfig(BaseModel):
    """Superpoint enhancement and coarse matching settings."""
    repeats: int = Field(default=1, ge=1, description="Times the stage sequence is applied")
    top_k: Optional[int] = Field(default=None, ge=1, description="Fixed K; None uses the default rule")
    top_k_cap: int = Field(default=256, ge=1)
    pos_dim: int = Field(default=64, ge=2)
    dist_dim: int = Field(default=16, ge=2)
    min_period: float = Field(default=0.5, gt=0.0)
    max_period: float = Field(default=200.0, gt=0.0)
    value_scale: float = Field(default=0.1, ge=0.0, description="Default value-projection scale")
    geo_value_scale: float = Field(default=0.5, ge=0.0, description="Default value scale of geometric attention")
    locality_radius: float = Field(default=4.0, gt=0.0, description="Default distance falloff of geometric attention (m)")
    mutual_rank: Optional[int] = Field(default=3, ge=1, description="Row and column rank a candidate must reach")
    weights_path: Optional[str] = None

    @model_validator(mode="after")
    def _check_encoding(self) -> "VgamConfig":
        if self.pos_dim % 2 or self.dist_dim % 2:
            raise ValueError("positional encoding dims must be even")
        if self.max_period <= self.min_period:
            raise ValueError("max_period must exceed min_period")
        if 4.0 * self.locality_radius > self.max_period:
            raise ValueError("locality_radius must stay below a quarter of max_period")
        return self


class VgamWeights(ArrayModel):
    """Single-head projections for the visual, self and geometric attention stages."""
    wq_c: np.ndarray
    wk_c: np.ndarray
    wv_c: np.ndarray
    we_c: np.ndarray
    wg_c: np.ndarray
    wq_s: np.ndarray
    wk_s: np.ndarray
    wv_s: np.ndarray
    wq_g: np.ndarray
    wk_g: np.ndarray
    wv_g: np.ndarray
    w_dist: np.ndarray

    ARRAY_ORDER: ClassVar[Tuple[str, ...]] = (
        "wq_c", "wk_c", "wv_c", "we_c", "wg_c",
        "wq_s", "wk_s", "wv_s", "wq_g", "wk_g", "wv_g", "w_dist",
    )

    @model_validator(mode="after")
    def _check_shapes(self) -> "VgamWeights":
        for name in self.ARRAY_ORDER:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} must be finite")
        expected = VgamWeights.shapes(*self.dims())
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        return self

    def dims(self) -> Tuple[int, int, int, int]:
        """(feature dim, image dim, positional dim, distance-embedding dim)."""
        return (
            int(self.wq_c.shape[0]),
            int(self.wk_c.shape[0]),
            int(self.we_c.shape[0]),
            int(self.w_dist.shape[0]),
        )

    @staticmethod
    def shapes(feat_dim: int, image_dim: int, pos_dim: int, dist_dim: int) -> Dict[str, Tuple[int, ...]]:
        square = (feat_dim, feat_dim)
        return {
            "wq_c": square, "wk_c": (image_dim, feat_dim), "wv_c": (image_dim, feat_dim),
            "we_c": (pos_dim, feat_dim), "wg_c": (pos_dim, feat_dim),
            "wq_s": square, "wk_s": square, "wv_s": square,
            "wq_g": square, "wk_g": square, "wv_g": square,
            "w_dist": (dist_dim,),
        }


class MaskedSuperpoints(ArrayModel):
    """
    Superpoints selected by an overlap mask.

    Attributes:
        points: (m, 3) positions
        features: (m, d) features
        index_map: (m,) original superpoint indices, increasing
    """
    points: np.ndarray
    features: np.ndarray
    index_map: np.ndarray

    def __len__(self) -> int:
        return int(self.index_map.shape[0])


# Dense matching
class MatchConfig(BaseModel):
    """Grouped Sinkhorn matching settings."""
    slack_alpha: float = Field(default=1.0, description="Slack (dustbin) score alpha")
    sinkhorn_iterations: int = Field(default=100, ge=1)
    top_k_per_group: int = Field(default=16, ge=1, description="K' per group")
    min_confidence: float = Field(default=0.0, ge=0.0, description="Confidence floor")
    weight_by_superpoint_score: bool = True
    max_group_points: Optional[int] = Field(default=64, ge=1, description="Dense points kept per group, nearest first")
    sinkhorn_tolerance: float = Field(default=1e-9, ge=0.0, description="Early stop on row-mass deviation; 0 runs all iterations")


class GroupedProblem(ArrayModel):
    """
    Dense matching problem for one superpoint correspondence.

    Attributes:
        source_superpoint / target_superpoint: Superpoint indices of the pair
        source_indices / target_indices: Dense point indices of the two groups
        source_features / target_features: Dense features of the groups
        superpoint_score: Confidence of the superpoint correspondence
    """
    source_superpoint: int
    target_superpoint: int
    source_indices: np.ndarray
    target_indices: np.ndarray
    source_features: np.ndarray
    target_features: np.ndarray
    superpoint_score: float = 1.0


# Pose estimation
class EstimatorConfig(BaseModel):
    """Pose estimator settings."""
    variant: EstimatorVariant = EstimatorVariant.LGR
    ransac_iterations: int = Field(default=50000, ge=1)
    inlier_threshold: float = Field(
        default=0.5, gt=0.0, description="Inlier residual (m) for RANSAC consensus and weighted-SVD counts",
    )
    ransac_sample_size: int = Field(default=3, ge=3, le=3)
    ransac_chunk: int = Field(default=1000, ge=1, description="Hypotheses per seeded chunk")
    seed: int = 0
    lgr_iterations: int = Field(default=5, ge=1)
    lgr_threshold: float = Field(default=0.5, gt=0.0)
    lgr_min_group_pairs: int = Field(default=3, ge=3)
    lgr_seed_neighbors: int = Field(
        default=12, ge=0, description="Compatible groups pooled into each local candidate; 0 fits groups alone",
    )
    lgr_compatibility_threshold: float = Field(
        default=1.5, gt=0.0, description="Pairwise distance change (m) two groups may show and stay compatible",
    )


ESTIMATOR_LABELS = {
    EstimatorVariant.WEIGHTED_SVD: "Weighted SVD",
    EstimatorVariant.LGR: "LGR",
}


def estimator_label(config: EstimatorConfig) -> str:
    """Display label of an estimator configuration."""
    if config.variant == EstimatorVariant.RANSAC:
        iterations = config.ransac_iterations
        count = f"{iterations // 1000}K" if iterations % 1000 == 0 else str(iterations)
        return f"RANSAC-{count}"
    return ESTIMATOR_LABELS[config.variant]


class PoseEstimate(BaseModel):
    """
    Output of a pose estimator.

    Attributes:
        transform: Estimated source-to-target transform
        inlier_count: Correspondences consistent with the estimate
        mean_residual: Mean residual (m) over the inliers
        variant: Estimator that produced it
        refinement_costs: Truncated-residual cost per accepted refinement step
    """
    transform: RigidTransform
    inlier_count: int = Field(..., ge=0)
    mean_residual: float = Field(..., ge=0.0)
    variant: EstimatorVariant
    refinement_costs: List[float] = Field(default_factory=list)


# Loss
class LossConfig(BaseModel):
    """Focal loss settings."""
    gamma: float = Field(default=2.0, ge=0.0, description="Focusing parameter")
    alpha: float = Field(default=0.25, gt=0.0, lt=1.0, description="Balancing parameter")
    eps: float = Field(default=1e-7, gt=0.0, lt=0.5, description="Probability clamp")


class LossReport(ArrayModel):
    """Mask loss value with per-element diagnostics."""
    loss: float = Field(..., ge=0.0)
    p_t: np.ndarray
    per_element: np.ndarray
    gradient: np.ndarray


# Pipeline
class PipelineConfig(BaseModel):
    """Complete registration pipeline configuration."""
    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    omp: OmpConfig = Field(default_factory=OmpConfig)
    vgam: VgamConfig = Field(default_factory=VgamConfig)
    match: MatchConfig = Field(default_factory=MatchConfig)
    estimator: EstimatorConfig = Field(default_factory=EstimatorConfig)
    use_omp: bool = True
    attention_mode: AttentionMode = AttentionMode.VGAM_FULL
    salient_only: bool = Field(default=True, description="Match only superpoints above ground with dense support")
    workers: int = Field(default=1, ge=1)
    rre_threshold: float = Field(default=2.0, gt=0.0)
    rte_threshold: float = Field(default=0.5, gt=0.0)
    ir_threshold: float = Field(default=1.0, gt=0.0)


class MaskStats(BaseModel):
    """Summary of the overlap masks used for matching."""
    source_fraction: float = Field(default=1.0, ge=0.0, le=1.0)
    target_fraction: float = Field(default=1.0, ge=0.0, le=1.0)
    source_kept: int = Field(default=0, ge=0)
    target_kept: int = Field(default=0, ge=0)
    fallback: Optional[str] = Field(default=None, description="Why matching ran unmasked")


class RegistrationResult(BaseModel):
    """
    Result of registering one pair.

    Attributes:
        pose: Estimated pose
        superpoint_correspondences: |C'|
        dense_correspondences: |C*|
        masks: Overlap mask statistics
        metrics: Evaluation against ground truth (only when GT supplied)
        timings_ms: Wall-clock time per stage
        flags: Fallbacks and warnings raised along the way
    """
    pose: PoseEstimate
    superpoint_correspondences: int = Field(..., ge=0)
    dense_correspondences: int = Field(..., ge=0)
    masks: MaskStats = Field(default_factory=MaskStats)
    metrics: Optional[RegistrationMetrics] = None
    timings_ms: Dict[str, float] = Field(default_factory=dict)
    flags: List[str] = Field(default_factory=list)


class PairRecord(BaseModel):
    """One line of the per-pair results table."""
    pair: str
    estimator: str
    rre: Optional[float] = None
    rte: Optional[float] = None
    success: bool = False
    ir: Optional[float] = None
    superpoint_correspondences: int = 0
    dense_correspondences: int = 0
    mask_source_fraction: float = 1.0
    mask_target_fraction: float = 1.0
    fallback: str = ""
    error: str = ""


class BenchmarkRow(BaseModel):
    """Aggregate metrics for one estimator over a pair set."""
    label: str
    estimator: str
    pairs: int
    successes: int
    mean_rre: Optional[float] = None
    mean_rte: Optional[float] = None
    recall: float
    mean_ir: float
    errors: int = 0


# Dataset generation
class SceneConfig(BaseModel):
    """Procedural scene layout."""
    boxes: int = Field(default=14, ge=0)
    cylinders: int = Field(default=12, ge=0)
    inner_radius: float = Field(default=5.0, gt=0.0)
    outer_radius: float = Field(default=28.0, gt=0.0)
    box_size_min: float = Field(default=1.0, gt=0.0)
    box_size_max: float = Field(default=7.0, gt=0.0)
    box_height_min: float = Field(default=1.2, gt=0.0)
    box_height_max: float = Field(default=5.0, gt=0.0)
    cylinder_radius_min: float = Field(default=0.15, gt=0.0)
    cylinder_radius_max: float = Field(default=0.6, gt=0.0)
    cylinder_height_min: float = Field(default=2.0, gt=0.0)
    cylinder_height_max: float = Field(default=7.0, gt=0.0)


class CameraConfig(BaseModel):
    """View image rendering settings."""
    width: int = Field(default=64, ge=8)
    height: int = Field(default=48, ge=8)
    h_fov_deg: float = Field(default=80.0, gt=0.0, lt=180.0)
    max_range: float = Field(default=40.0, gt=0.0)
    yaw_jitter_deg: float = Field(default=5.0, ge=0.0)
    position_jitter: float = Field(default=0.3, ge=0.0)


class PairConfig(BaseModel):
    """Sensor placement and overlap acceptance."""
    min_overlap: float = Field(default=0.4, gt=0.0, le=1.0)
    max_overlap: float = Field(default=0.9, gt=0.0, le=1.0)
    overlap_radius: float = Field(default=0.5, gt=0.0, description="2 x pipeline voxel size")
    retries: int = Field(default=20, ge=0)
    ring_height: float = Field(default=1.9, gt=0.0)
    fan_height: float = Field(default=1.6, gt=0.0)
    fan_offset_max: float = Field(default=4.0, ge=0.0)
    fan_yaw_max_deg: float = Field(default=45.0, ge=0.0)
    fan_heading_max_deg: float = Field(default=60.0, ge=0.0, description="Fan facing direction spread")
    jitter_yaw_deg: float = Field(default=10.0, ge=0.0)
    jitter_position: float = Field(default=1.0, ge=0.0)
    scene_attempts: int = Field(default=5, ge=1)

    @model_validator(mode="after")
    def _check_overlap_range(self) -> "PairConfig":
        if self.max_overlap < self.min_overlap:
            raise ValueError("max_overlap must be >= min_overlap")
        return self


class DatasetConfig(BaseModel):
    """Everything needed to generate a synthetic dataset."""
    scene: SceneConfig = Field(default_factory=SceneConfig)
    ring: RingLidarSpec = Field(default_factory=RingLidarSpec)
    fan: FanLidarSpec = Field(default_factory=FanLidarSpec)
    degradation: DegradationSpec = Field(default_factory=DegradationSpec)
    camera: CameraConfig = Field(default_factory=CameraConfig)
    pair: PairConfig = Field(default_factory=PairConfig)
    seed: int = 0


class RunManifest(BaseModel):
    """Provenance record written next to every output artifact set."""
    tool_version: str = TOOL_VERSION
    command: str
    config: Dict[str, Any] = Field(default_factory=dict)
    seeds: Dict[str, int] = Field(default_factory=dict)
    inputs: List[str] = Field(default_factory=list)
    outputs: List[str] = Field(default_factory=list)
    timings_ms: Dict[str, float] = Field(default_factory=dict)


# SQLAlchemy Database Models
class RunDB(Base):
    """
    Database model for registration runs.

    One row per `register` invocation, with the configuration snapshot
    and the headline metrics.
    """
    __tablename__ = "runs"

    id = Column(Integer, primary_key=True, index=True)
    command = Column(String(50), nullable=False)
    label = Column(String(200), nullable=False)
    config = Column(JSON)
    seeds = Column(JSON)
    recall = Column(Float)
    mean_ir = Column(Float)
    pair_count = Column(Integer, default=0)
    created_time = Column(DateTime(timezone=True), server_default=func.now())


class PairResultDB(Base):
    """
    Database model for per-pair, per-estimator results.
    """
    __tablename__ = "pair_results"

    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, nullable=False, index=True)  # Foreign key to runs
    pair = Column(String(200), nullable=False)
    estimator = Column(String(50), nullable=False)
    rre = Column(Float)
    rte = Column(Float)
    success = Column(Boolean, default=False)
    ir = Column(Float)
    superpoint_correspondences = Column(Integer, default=0)
    dense_correspondences = Column(Integer, default=0)
    mask_source_fraction = Column(Float)
    mask_target_fraction = Column(Float)
    fallback = Column(Text)
    error = Column(Text)
    timings = Column(JSON)
