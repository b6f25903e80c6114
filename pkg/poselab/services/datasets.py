"""Dataset assembly: train/val assignment and BOP import."""

import logging
from pathlib import Path

import numpy as np

from poselab.errors import DataError
from poselab.models.dataset import (
    DatasetManifest,
    ManifestRecord,
    ObjectModel,
    Split,
    max_pairwise_distance,
)
from poselab.services.bop import load_bop_split, load_object_models
from poselab.services.storage import write_manifest, write_models

logger = logging.getLogger(__name__)


def assign_train_val(
    records: list[ManifestRecord], val_fraction: float, seed: int
) -> list[ManifestRecord]:
    """Seeded split of ``records`` into train and val, keeping the input order.

    The validation share is ``round(val_fraction * len(records))`` records.
    """
    count = len(records)
    n_val = int(round(val_fraction * count))
    order = np.random.default_rng(seed).permutation(count)
    val = set(order[:n_val].tolist())
    return [
        r.model_copy(update={"split": Split.VAL if i in val else Split.TRAIN})
        for i, r in enumerate(records)
    ]


def model_diameter(vertices: np.ndarray) -> float:
    """Maximum pairwise distance between vertices."""
    return max_pairwise_distance(vertices)


def import_bop_dataset(
    bop_dir: str | Path,
    out_dir: str | Path,
    train_split: str = "train_pbr",
    test_split: str = "test",
    val_fraction: float = 0.1,
    seed: int = 0,
) -> tuple[DatasetManifest, dict[int, ObjectModel]]:
    """Index a BOP dataset into a PoseLab dataset directory.

    Images stay where they are (the manifest stores absolute paths); object
    models are rewritten under ``out_dir/models``.
    """
    bop_dir, out_dir = Path(bop_dir), Path(out_dir)
    models = load_object_models(bop_dir / "models")
    if not models:
        raise DataError(f"no object models under {bop_dir / 'models'}")
    records: list[ManifestRecord] = []
    if (bop_dir / train_split).is_dir():
        records += assign_train_val(
            load_bop_split(bop_dir / train_split, Split.TRAIN), val_fraction, seed
        )
    if (bop_dir / test_split).is_dir():
        records += load_bop_split(bop_dir / test_split, Split.TEST)
    if not records:
        raise DataError(f"no scenes found under {bop_dir}/{{{train_split},{test_split}}}")
    manifest = DatasetManifest(root=out_dir, records=records)
    write_manifest(manifest)
    write_models(out_dir, list(models.values()))
    logger.info("imported %d records of %d objects into %s", len(records), len(models), out_dir)
    return manifest, models
