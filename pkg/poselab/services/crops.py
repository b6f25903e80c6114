"""Crop-and-resize preprocessing, visibility filtering and the crop dataset."""

import logging
from collections.abc import Iterable, Sequence

import cv2
import numpy as np
import torch
from torch.utils.data import Dataset

from poselab.errors import DataError, EmptyCrop
from poselab.models.dataset import DatasetManifest, LabeledCrop, ManifestRecord, one_hot
from poselab.models.geometry import BoundingBox
from poselab.models.settings import CROP_SIZE
from poselab.services.evaluation import bbox_jitter

logger = logging.getLogger(__name__)

DEFAULT_VISIBILITY_THRESHOLD = 0.10


def load_image(path: str) -> np.ndarray:
    """RGB image as float32 in [0, 1]."""
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise DataError(f"cannot read image {path}")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def _as_float_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float32) / 255.0
    return np.clip(image.astype(np.float32), 0.0, 1.0)


def crop_square(bbox: BoundingBox) -> tuple[int, int, int]:
    """(x0, y0, side) of the square centred on ``bbox`` with side max(w, h)."""
    side = max(1, int(round(max(bbox.w, bbox.h))))
    cx, cy = bbox.centre
    x0 = int(np.floor(cx - side / 2.0 + 0.5))
    y0 = int(np.floor(cy - side / 2.0 + 0.5))
    return x0, y0, side


def crop_square_region(array: np.ndarray, bbox: BoundingBox) -> np.ndarray:
    """The square region around ``bbox``; parts outside ``array`` are zero."""
    if array.size == 0:
        raise EmptyCrop("scene image is empty")
    height, width = array.shape[:2]
    x0, y0, side = crop_square(bbox)
    ix0, iy0 = max(x0, 0), max(y0, 0)
    ix1, iy1 = min(x0 + side, width), min(y0 + side, height)
    if ix0 >= ix1 or iy0 >= iy1:
        raise EmptyCrop(
            f"crop square at ({x0}, {y0}) size {side} misses the {width}x{height} image"
        )
    square = np.zeros((side, side) + array.shape[2:], dtype=array.dtype)
    square[iy0 - y0 : iy1 - y0, ix0 - x0 : ix1 - x0] = array[iy0:iy1, ix0:ix1]
    return square


def crop_and_resize(
    scene_image: np.ndarray, bbox: BoundingBox, size: int = CROP_SIZE
) -> np.ndarray:
    """Square crop around ``bbox``, zero padded, bicubically resized to size x size x 3."""
    square = crop_square_region(_as_float_image(scene_image), bbox)
    if square.shape[0] != size:
        square = cv2.resize(square, (size, size), interpolation=cv2.INTER_CUBIC)
    return np.clip(square, 0.0, 1.0).astype(np.float32)


def filter_by_visibility(
    records: Iterable[ManifestRecord], threshold: float = DEFAULT_VISIBILITY_THRESHOLD
) -> list[ManifestRecord]:
    """Records whose visible fraction is at least ``threshold``."""
    return [r for r in records if r.visibility >= threshold]


def class_index(object_ids: Sequence[int]) -> dict[int, int]:
    """One-hot position of each object id."""
    return {obj_id: i for i, obj_id in enumerate(sorted(object_ids))}


def make_labeled_crop(
    manifest: DatasetManifest,
    record: ManifestRecord,
    classes: dict[int, int],
    bbox: BoundingBox | None = None,
    with_target: bool = False,
) -> LabeledCrop:
    """Network input for ``record``; ``bbox`` overrides the record's box."""
    bbox = bbox or record.bbox
    if record.object_id not in classes:
        raise DataError(f"object {record.object_id} is not one of the trained classes")
    image = crop_and_resize(load_image(str(manifest.resolve(record.image_path))), bbox)
    target = None
    if with_target:
        if record.target_path is None:
            raise DataError(
                f"record {record.key} has no clean reconstruction target"
            )
        target = crop_and_resize(load_image(str(manifest.resolve(record.target_path))), bbox)
    return LabeledCrop(
        image=image,
        label=one_hot(classes[record.object_id], len(classes)),
        bbox=bbox,
        intrinsics=record.intrinsics,
        gt_pose=record.gt_pose,
        clean_target=target,
        visibility=record.visibility,
    )


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """HxWx3 array to a 3xHxW float tensor."""
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))


class CropDataset(Dataset):
    """Labelled crops (and clean targets) of manifest records.

    With ``jitter > 0`` the box of every item is perturbed; the perturbation
    depends only on (seed, epoch, index), so epochs are reproducible.
    """

    def __init__(
        self,
        manifest: DatasetManifest,
        records: Sequence[ManifestRecord],
        classes: dict[int, int],
        jitter: float = 0.0,
        seed: int = 0,
        with_targets: bool = True,
    ):
        if not records:
            raise DataError("crop dataset has no records")
        if with_targets:
            missing = [r.key for r in records if r.target_path is None]
            if missing:
                raise DataError(
                    f"{len(missing)} record(s) lack clean reconstruction targets, e.g. {missing[0]}"
                )
        self.manifest = manifest
        self.records = list(records)
        self.classes = classes
        self.jitter = jitter
        self.seed = seed
        self.with_targets = with_targets
        self.epoch = 0

    def set_epoch(self, epoch: int) -> None:
        """Select the jitter draw of an epoch."""
        self.epoch = epoch

    def box(self, index: int) -> BoundingBox:
        """The (possibly jittered) box used for item ``index``."""
        record = self.records[index]
        if self.jitter <= 0:
            return record.bbox
        return bbox_jitter(record.bbox, self.jitter, [self.seed, self.epoch, index])

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> dict[str, torch.Tensor]:
        crop = make_labeled_crop(
            self.manifest,
            self.records[index],
            self.classes,
            bbox=self.box(index),
            with_target=self.with_targets,
        )
        item = {
            "image": to_tensor(crop.image),
            "label": torch.from_numpy(crop.label),
            "index": torch.tensor(index),
        }
        if crop.clean_target is not None:
            item["target"] = to_tensor(crop.clean_target)
        return item
