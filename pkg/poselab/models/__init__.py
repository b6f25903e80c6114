"""Data models for PoseLab."""

from poselab.models.dataset import (
    DatasetManifest,
    LabeledCrop,
    ManifestRecord,
    ObjectModel,
    Split,
    one_hot,
)
from poselab.models.geometry import BoundingBox, CameraIntrinsics, Pose, ProjectiveCentre
from poselab.models.results import EvalRecord, Report, ThresholdGrid
from poselab.models.settings import (
    CvaeConfig,
    GeneratorConfig,
    LabelMode,
    LabelVariant,
    MlpConfig,
    RunConfig,
)

__all__ = [
    "BoundingBox",
    "CameraIntrinsics",
    "CvaeConfig",
    "DatasetManifest",
    "EvalRecord",
    "GeneratorConfig",
    "LabelMode",
    "LabelVariant",
    "LabeledCrop",
    "ManifestRecord",
    "MlpConfig",
    "ObjectModel",
    "Pose",
    "ProjectiveCentre",
    "Report",
    "RunConfig",
    "Split",
    "ThresholdGrid",
    "one_hot",
]
