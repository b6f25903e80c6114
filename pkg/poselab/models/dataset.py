"""Dataset records, manifests, object models and network input crops."""

from enum import Enum
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from poselab.models.geometry import BoundingBox, CameraIntrinsics, Pose

DIAMETER_RTOL = 0.01


def max_pairwise_distance(points: np.ndarray) -> float:
    """Largest distance between two points; 0 for fewer than two.

    The farthest pair lies on the convex hull, so large clouds are reduced to
    their hull vertices first. Flat or collinear clouds use every point.
    """
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return 0.0
    if len(points) > 64:
        try:
            points = points[ConvexHull(points).vertices]
        except QhullError:
            pass
    return float(pdist(points).max())


class Split(str, Enum):
    """Dataset partitions."""

    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class ManifestRecord(BaseModel):
    """One object instance in one scene image."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    scene_id: int
    image_id: int
    object_id: int
    split: Split
    bbox: BoundingBox
    intrinsics: CameraIntrinsics
    gt_pose: Pose | None = None
    visibility: float = Field(ge=0.0, le=1.0)
    image_path: str
    target_path: str | None = None  # object rendered alone, same pose, black background
    mask_path: str | None = None
    mask_visib_path: str | None = None

    @property
    def key(self) -> tuple[int, int, int]:
        """(scene_id, image_id, object_id); unique within a split."""
        return self.scene_id, self.image_id, self.object_id


class ObjectModel(BaseModel):
    """Evaluation model of an object: surface points, diameter and symmetries."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    object_id: int
    name: str = ""
    vertices: np.ndarray  # (N, 3) metres
    diameter: float = Field(gt=0, description="Max pairwise vertex distance (metres)")
    symmetries: list[np.ndarray]  # discrete 3x3 rotations, identity included

    @field_validator("vertices")
    @classmethod
    def _vertex_array(cls, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=float)
        if value.ndim != 2 or value.shape[1] != 3:
            raise ValueError("vertices must be an (N, 3) array")
        return value

    @field_validator("symmetries")
    @classmethod
    def _has_identity(cls, value: list[np.ndarray]) -> list[np.ndarray]:
        value = [np.asarray(s, dtype=float).reshape(3, 3) for s in value]
        if not any(np.allclose(s, np.eye(3), atol=1e-6) for s in value):
            value = [np.eye(3)] + value
        return value

    @model_validator(mode="after")
    def _diameter_matches_vertices(self) -> "ObjectModel":
        if len(self.vertices) < 2:
            return self
        measured = max_pairwise_distance(self.vertices)
        if abs(self.diameter - measured) > DIAMETER_RTOL * measured:
            raise ValueError(
                f"diameter {self.diameter:.6g} m differs from the vertex extent "
                f"{measured:.6g} m by more than {DIAMETER_RTOL:.0%}"
            )
        return self


class DatasetManifest(BaseModel):
    """All records of a prepared dataset directory."""

    root: Path
    records: list[ManifestRecord]

    def split(self, split: Split | str) -> list[ManifestRecord]:
        """Records of one split, in manifest order."""
        split = Split(split)
        return [r for r in self.records if r.split == split]

    @property
    def train(self) -> list[ManifestRecord]:
        return self.split(Split.TRAIN)

    @property
    def val(self) -> list[ManifestRecord]:
        return self.split(Split.VAL)

    @property
    def test(self) -> list[ManifestRecord]:
        return self.split(Split.TEST)

    @property
    def object_ids(self) -> list[int]:
        """Sorted object ids; the position of an id is its one-hot index."""
        return sorted({r.object_id for r in self.records})

    def resolve(self, path: str) -> Path:
        """Resolve a record path relative to the dataset root."""
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    @model_validator(mode="after")
    def _test_disjoint(self) -> "DatasetManifest":
        test_images = {r.image_path for r in self.records if r.split == Split.TEST}
        if any(r.image_path in test_images for r in self.records if r.split != Split.TEST):
            raise ValueError("test images overlap train/val images")
        return self


class LabeledCrop(BaseModel):
    """Network input: a square object crop plus its class label and metadata."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    image: np.ndarray  # (128, 128, 3) float32 in [0, 1]
    label: np.ndarray  # one-hot (K,)
    bbox: BoundingBox
    intrinsics: CameraIntrinsics
    gt_pose: Pose | None = None
    clean_target: np.ndarray | None = None
    visibility: float = Field(default=1.0, ge=0.0, le=1.0)

    @field_validator("image", "clean_target")
    @classmethod
    def _unit_range(cls, value: np.ndarray | None) -> np.ndarray | None:
        if value is None:
            return value
        if value.ndim != 3 or value.shape[2] != 3:
            raise ValueError("crop images must be HxWx3")
        if value.min() < 0.0 or value.max() > 1.0:
            raise ValueError("crop values must lie in [0, 1]")
        return value

    @field_validator("label")
    @classmethod
    def _one_hot(cls, value: np.ndarray) -> np.ndarray:
        value = np.asarray(value, dtype=np.float32)
        if value.ndim != 1 or np.count_nonzero(value == 1.0) != 1 or np.count_nonzero(value) != 1:
            raise ValueError("label must be a one-hot vector")
        return value


def one_hot(index: int, num_classes: int) -> np.ndarray:
    """One-hot float32 vector with a 1 at ``index``."""
    label = np.zeros(num_classes, dtype=np.float32)
    label[index] = 1.0
    return label
