"""Shared fixtures: small cameras, record factories and a tiny generated dataset."""

import os
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import settings

from poselab.models.dataset import ManifestRecord, ObjectModel, Split
from poselab.models.geometry import BoundingBox, CameraIntrinsics, Pose
from poselab.models.settings import CvaeConfig, RunConfig
from poselab.services.synthetic import GeneratedDataset, generate_synthetic_dataset
from poselab.services.training import (
    CvaeTrainingResult,
    HeadTrainingResult,
    train_cvae,
    train_heads,
)

settings.register_profile("ci", max_examples=50, deadline=None, derandomize=True)
settings.register_profile("dev", max_examples=10, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

TINY_GENERATOR = {
    "shapes": ["box4", "wedge"],
    "images_per_object": 4,
    "test_images_per_object": 2,
    "objects_per_scene": 2,
    "occluders_per_object": 0.0,
    "clutter_items": 3,
    "image_width": 160,
    "image_height": 120,
    "fx": 143.1,
    "fy": 143.4,
    "px": 80.0,
    "py": 60.0,
    "val_fraction": 0.25,
    "eval_points": 50,
    "seed": 0,
}


@pytest.fixture
def intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(fx=500.0, fy=500.0, px=64.0, py=48.0, width=128, height=96)


@pytest.fixture
def record_factory(intrinsics):
    """Build manifest records with sensible defaults."""

    def make(
        object_id: int = 1,
        visibility: float = 1.0,
        split: Split = Split.TRAIN,
        image_id: int = 0,
        scene_id: int = 0,
        pose: Pose | None = None,
    ) -> ManifestRecord:
        return ManifestRecord(
            scene_id=scene_id,
            image_id=image_id,
            object_id=object_id,
            split=split,
            bbox=BoundingBox(bx=10, by=10, w=20, h=20),
            intrinsics=intrinsics,
            gt_pose=pose or Pose.from_arrays(np.eye(3), [0.0, 0.0, 1.0]),
            visibility=visibility,
            image_path=f"{split.value}/{scene_id:06d}/rgb/{image_id:06d}.png",
        )

    return make


@pytest.fixture
def cube_model() -> ObjectModel:
    """Eight corners of a 0.1 m cube, no symmetries."""
    corners = np.array(
        [[x, y, z] for x in (-0.05, 0.05) for y in (-0.05, 0.05) for z in (-0.05, 0.05)]
    )
    return ObjectModel(
        object_id=1, vertices=corners, diameter=float(np.sqrt(3) * 0.1), symmetries=[np.eye(3)]
    )


@pytest.fixture
def small_cvae_config() -> CvaeConfig:
    return CvaeConfig(latent_dim=8, num_classes=3, encoder_width=4, decoder_width=16)


@pytest.fixture
def tiny_generator_config() -> dict:
    return dict(TINY_GENERATOR)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A two-object generated dataset shared by the read-only tests."""
    out = tmp_path_factory.mktemp("tiny_dataset")
    return generate_synthetic_dataset(dict(TINY_GENERATOR), out)


TOY_GENERATOR = {
    **TINY_GENERATOR,
    "shapes": ["box4", "wedge", "lshape"],
    "images_per_object": 120,
    "test_images_per_object": 40,
    "objects_per_scene": 3,
    "occluders_per_object": 1.0,
    "clutter_items": 10,
    "val_fraction": 0.2,
    "eval_points": 200,
}

TOY_RUN = {
    "cvae": {"latent_dim": 16, "encoder_width": 8, "decoder_width": 32},
    "training": {"max_epochs": 40, "learning_rate": 1e-3, "batch_size": 32,
                 "plateau_patience": 5, "stop_patience": 5},
    "heads_training": {"max_epochs": 2000, "plateau_patience": 100, "stop_patience": 200},
}


@dataclass
class ToyRun:
    dataset: GeneratedDataset
    config: RunConfig
    cvae: CvaeTrainingResult
    heads: HeadTrainingResult


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory) -> ToyRun:
    """A three-object occluded dataset with a trained CVAE and heads (slow tests only)."""
    dataset = generate_synthetic_dataset(dict(TOY_GENERATOR), tmp_path_factory.mktemp("toy"))
    config = RunConfig.model_validate(TOY_RUN)
    cvae = train_cvae(dataset.manifest, config)
    heads = train_heads(dataset.manifest, cvae.model, config)
    return ToyRun(dataset, config, cvae, heads)
