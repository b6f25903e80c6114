"""Evaluation records, threshold grids and report models."""

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from poselab.models.geometry import CameraIntrinsics, Pose

AR_LABEL = "AR (no-VSD)"


class ThresholdGrid(BaseModel):
    """Correctness thresholds used for recall curves."""

    model_config = ConfigDict(frozen=True)

    mssd: tuple[float, ...] = tuple(round(0.05 * i, 2) for i in range(1, 11))  # x diameter
    mspd: tuple[float, ...] = tuple(float(5 * i) for i in range(1, 11))  # x r
    fine_mspd: tuple[float, ...] = tuple(float(i) for i in range(1, 51))  # x r

    @model_validator(mode="after")
    def _strictly_increasing(self) -> "ThresholdGrid":
        for name in ("mssd", "mspd", "fine_mspd"):
            values = np.asarray(getattr(self, name))
            if values.size == 0 or np.any(np.diff(values) <= 0):
                raise ValueError(f"{name} thresholds must be nonempty and strictly increasing")
        return self


def pixel_scale(image_width: int) -> float:
    """MSPD threshold unit r = image_width / 640."""
    return image_width / 640.0


class EvalRecord(BaseModel):
    """One estimated pose paired with its ground truth."""

    scene_id: int
    image_id: int
    object_id: int
    est_pose: Pose | None = None  # None when the method produced no estimate
    gt_pose: Pose
    intrinsics: CameraIntrinsics
    visibility: float = Field(ge=0.0, le=1.0)
    image_width: int = Field(gt=0)


class RecallCurve(BaseModel):
    """Per-threshold recalls and their mean."""

    thresholds: list[float]
    recalls: list[float]
    average: float


class ObjectScores(BaseModel):
    """Scores of one object (or of the whole dataset)."""

    count: int
    ar_mssd: float
    ar_mspd: float
    ar: float = Field(description=AR_LABEL)
    mae_centre_px: float
    mae_distance_mm: float
    mean_rotation_error_deg: float
    mean_translation_error_mm: float


class BinStats(BaseModel):
    """Box-plot statistics of one visibility bin."""

    bin_low: float
    bin_high: float
    count: int
    q1: float | None = None
    median: float | None = None
    q3: float | None = None
    whisker_low: float | None = None
    whisker_high: float | None = None


class Failure(BaseModel):
    """A record that could not be scored."""

    scene_id: int
    image_id: int
    object_id: int
    reason: str


class Report(BaseModel):
    """Full evaluation report."""

    ar_label: str = AR_LABEL
    overall: ObjectScores
    per_object: dict[int, ObjectScores]
    mssd_curve: RecallCurve
    mspd_curve: RecallCurve
    visibility_bins_mspd_error: list[BinStats]
    visibility_bins_mspd_recall: list[BinStats]
    visibility_bins_centre_error: list[BinStats]
    failures: list[Failure] = []
