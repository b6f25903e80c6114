from .evaluation import aggregate_report, bbox_jitter, mspd, mssd, recall_curve
from .geometry import (
    backproject_centre,
    gram_schmidt_6d,
    project_point,
    random_rotation,
    rotation_to_6d,
)
from .storage import Storage, read_manifest, write_manifest

__all__ = [
    "aggregate_report",
    "backproject_centre",
    "bbox_jitter",
    "gram_schmidt_6d",
    "mspd",
    "mssd",
    "project_point",
    "random_rotation",
    "read_manifest",
    "recall_curve",
    "rotation_to_6d",
    "Storage",
    "write_manifest",
]
