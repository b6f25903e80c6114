"""Lookup-table baseline: nearest training embedding by cosine similarity.

The estimate copies rotation and distance from the most similar training
instance of the same class and takes the box centre as projective centre.
"""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from poselab.errors import DataError, MissingClass, ShapeMismatch
from poselab.models.geometry import BoundingBox, CameraIntrinsics, Pose, ProjectiveCentre
from poselab.services.geometry import backproject_centre
from poselab.services.storage import load_codebook_arrays, save_codebook_arrays

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Codebook:
    """Training embeddings with the ground truth they were encoded from."""

    mu: np.ndarray  # (M, n)
    object_ids: np.ndarray  # (M,)
    rotations: np.ndarray  # (M, 3, 3)
    tz: np.ndarray  # (M,) metres
    metric: str = "cosine"

    def __post_init__(self) -> None:
        count = len(self.mu)
        if count == 0:
            raise DataError("codebook has no entries")
        if self.mu.ndim != 2:
            raise ShapeMismatch("codebook mu must be (M, n)")
        if not (len(self.object_ids) == len(self.rotations) == len(self.tz) == count):
            raise ShapeMismatch("codebook columns differ in length")

    @property
    def latent_dim(self) -> int:
        return self.mu.shape[1]

    def __len__(self) -> int:
        return len(self.mu)

    def counts(self) -> dict[int, int]:
        """Entries per object id."""
        ids, counts = np.unique(self.object_ids, return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def save(self, path: str | Path) -> Path:
        return save_codebook_arrays(path, self.mu, self.object_ids, self.rotations, self.tz)

    @classmethod
    def load(cls, path: str | Path) -> "Codebook":
        mu, object_ids, rotations, tz = load_codebook_arrays(path)
        return cls(mu=mu, object_ids=object_ids, rotations=rotations, tz=tz)


def build_codebook(
    mu: np.ndarray, object_ids: np.ndarray, rotations: np.ndarray, tz: np.ndarray
) -> Codebook:
    """One entry per training instance, in the given order."""
    if len(mu) == 0:
        raise DataError("cannot build a codebook from an empty training set")
    codebook = Codebook(
        mu=np.asarray(mu, dtype=np.float32),
        object_ids=np.asarray(object_ids, dtype=np.int64),
        rotations=np.asarray(rotations, dtype=float).reshape(-1, 3, 3),
        tz=np.asarray(tz, dtype=float),
    )
    logger.info("codebook: %d entries, n=%d, per object %s",
                len(codebook), codebook.latent_dim, codebook.counts())
    return codebook


def nearest_entry(mu: np.ndarray, object_id: int, codebook: Codebook) -> int:
    """Index of the most cosine-similar same-class entry; ties go to the lowest index."""
    mu = np.asarray(mu, dtype=float).reshape(1, -1)
    if mu.shape[1] != codebook.latent_dim:
        raise ShapeMismatch(f"query has {mu.shape[1]} dims, codebook {codebook.latent_dim}")
    candidates = np.flatnonzero(codebook.object_ids == object_id)
    if candidates.size == 0:
        raise MissingClass(f"codebook has no entries for object {object_id}")
    distances = cdist(mu, codebook.mu[candidates].astype(float), metric="cosine")[0]
    # a zero vector has undefined cosine similarity
    distances = np.nan_to_num(distances, nan=np.inf)
    return int(candidates[np.argmin(distances)])


def lut_estimate(
    mu: np.ndarray, object_id: int, bbox: BoundingBox, K: CameraIntrinsics, codebook: Codebook
) -> Pose:
    """Copy rotation and Tz from the nearest entry; centre = box centre."""
    index = nearest_entry(mu, object_id, codebook)
    cx, cy = bbox.centre
    t = backproject_centre(ProjectiveCentre(cx=cx, cy=cy), float(codebook.tz[index]), K)
    return Pose.from_arrays(codebook.rotations[index], t)
