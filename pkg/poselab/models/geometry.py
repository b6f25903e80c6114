"""Camera, bounding-box and pose models."""

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class CameraIntrinsics(BaseModel):
    """Pinhole intrinsics of the camera that took a scene image."""

    model_config = ConfigDict(frozen=True)

    fx: float = Field(gt=0, description="Focal length along x (pixels)")
    fy: float = Field(gt=0, description="Focal length along y (pixels)")
    px: float = Field(ge=0, description="Principal point x (pixels)")
    py: float = Field(ge=0, description="Principal point y (pixels)")
    width: int = Field(gt=0, description="Image width (pixels)")
    height: int = Field(gt=0, description="Image height (pixels)")

    @model_validator(mode="after")
    def _principal_point_inside(self) -> "CameraIntrinsics":
        if not (self.px < self.width and self.py < self.height):
            raise ValueError("principal point must lie inside the image")
        return self

    @property
    def matrix(self) -> np.ndarray:
        """The 3x3 camera matrix."""
        return np.array(
            [[self.fx, 0.0, self.px], [0.0, self.fy, self.py], [0.0, 0.0, 1.0]]
        )

    @classmethod
    def from_matrix(
        cls, K: list[float] | np.ndarray, width: int, height: int
    ) -> "CameraIntrinsics":
        """Build from a 3x3 (or flattened row-major) camera matrix."""
        k = np.asarray(K, dtype=float).reshape(3, 3)
        return cls(fx=k[0, 0], fy=k[1, 1], px=k[0, 2], py=k[1, 2], width=width, height=height)


class BoundingBox(BaseModel):
    """Axis-aligned box in scene pixels; may extend past the image borders."""

    model_config = ConfigDict(frozen=True)

    bx: float
    by: float
    w: float = Field(gt=0)
    h: float = Field(gt=0)

    @property
    def centre(self) -> tuple[float, float]:
        """Box centre (x, y)."""
        return self.bx + self.w / 2.0, self.by + self.h / 2.0

    def as_list(self) -> list[float]:
        """BOP ordering [x, y, w, h]."""
        return [self.bx, self.by, self.w, self.h]


class ProjectiveCentre(BaseModel):
    """Image projection of the object origin; may fall outside the image."""

    model_config = ConfigDict(frozen=True)

    cx: float
    cy: float

    @field_validator("cx", "cy")
    @classmethod
    def _finite(cls, value: float) -> float:
        if not np.isfinite(value):
            raise ValueError("projective centre must be finite")
        return value


class Pose(BaseModel):
    """Rigid object-to-camera transform x -> R x + T, translation in metres."""

    model_config = ConfigDict(frozen=True)

    rotation: tuple[float, float, float, float, float, float, float, float, float]
    translation: tuple[float, float, float]

    @field_validator("translation")
    @classmethod
    def _in_front_of_camera(cls, value: tuple[float, float, float]) -> tuple[float, float, float]:
        if not value[2] > 0:
            raise ValueError("translation z must be positive (object in front of camera)")
        return value

    @property
    def R(self) -> np.ndarray:
        """Rotation as a 3x3 array."""
        return np.asarray(self.rotation, dtype=float).reshape(3, 3)

    @property
    def t(self) -> np.ndarray:
        """Translation as a 3-vector (metres)."""
        return np.asarray(self.translation, dtype=float)

    @classmethod
    def from_arrays(cls, R: np.ndarray, t: np.ndarray) -> "Pose":
        """Build from a 3x3 rotation and a 3-vector translation."""
        return cls(
            rotation=tuple(float(v) for v in np.asarray(R, dtype=float).reshape(9)),
            translation=tuple(float(v) for v in np.asarray(t, dtype=float).reshape(3)),
        )

    def transform(self, points: np.ndarray) -> np.ndarray:
        """Apply the pose to an (N, 3) array of points."""
        return np.asarray(points, dtype=float) @ self.R.T + self.t
