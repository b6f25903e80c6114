"""File storage for manifests, checkpoints, codebooks and run manifests."""

import hashlib
import json
import logging
import platform
import struct
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from poselab import __version__
from poselab.errors import DataError, ParseError
from poselab.models.dataset import DatasetManifest, ManifestRecord, ObjectModel, Split
from poselab.services.bop import load_object_models, read_json, write_object_models

logger = logging.getLogger(__name__)

CSV_FLOAT_FORMAT = "%.9g"


class Storage:
    """JSON document storage rooted at a directory."""

    def __init__(self, root: str | Path):
        """
        Initialize storage with a directory path.

        Args:
            root: Directory holding the JSON documents
        """
        self.storage_path = Path(root)
        self.storage_path.mkdir(parents=True, exist_ok=True)

    def _get_file_path(self, key: str) -> Path:
        """Get the file path for a storage key."""
        return self.storage_path / f"{key}.json"

    def save(self, key: str, data: Any) -> Path:
        """
        Save data to a JSON file with sorted keys.

        Args:
            key: Storage key (becomes filename)
            data: JSON-serializable data

        Returns:
            Path of the written file
        """
        file_path = self._get_file_path(key)
        try:
            with open(file_path, "w") as f:
                json.dump(data, f, indent=2, sort_keys=True)
        except (OSError, TypeError) as e:
            raise DataError(f"cannot save {file_path}: {e}") from e
        return file_path

    def load(self, key: str, default: Any = None) -> Any:
        """
        Load data from a JSON file.

        Args:
            key: Storage key
            default: Value returned when the key does not exist

        Returns:
            Loaded data or default value
        """
        file_path = self._get_file_path(key)
        if not file_path.exists():
            return default
        return read_json(file_path)

    def exists(self, key: str) -> bool:
        """Check if a key exists in storage."""
        return self._get_file_path(key).exists()


def manifest_path(root: str | Path, split: Split | str) -> Path:
    """Location of the JSON-lines manifest of one split."""
    return Path(root) / f"manifest_{Split(split).value}.jsonl"


def write_manifest(manifest: DatasetManifest) -> list[Path]:
    """Write one JSON-lines file per split under ``manifest.root``.

    Each line is a ``ManifestRecord``; paths are stored as given (relative to
    the dataset root or absolute).
    """
    root = Path(manifest.root)
    root.mkdir(parents=True, exist_ok=True)
    written = []
    for split in Split:
        path = manifest_path(root, split)
        with open(path, "w") as f:
            for record in manifest.split(split):
                f.write(record.model_dump_json() + "\n")
        written.append(path)
    return written


def read_manifest(root: str | Path) -> DatasetManifest:
    """Load every split manifest found under ``root``."""
    root = Path(root)
    records: list[ManifestRecord] = []
    found = False
    for split in Split:
        path = manifest_path(root, split)
        if not path.exists():
            continue
        found = True
        with open(path) as f:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(ManifestRecord.model_validate_json(line))
                except ValueError as exc:
                    raise ParseError(
                        f"invalid record: {exc}", path=str(path), line=line_no
                    ) from exc
    if not found:
        raise DataError(f"no manifest files under {root}")
    return DatasetManifest(root=root, records=records)


def write_models(root: str | Path, models: list[ObjectModel], meshes: dict | None = None) -> None:
    """Object models of a dataset directory (BOP ``models`` layout)."""
    write_object_models(Path(root) / "models", models, meshes)


def read_models(root: str | Path) -> dict[int, ObjectModel]:
    """Object models of a dataset directory."""
    return load_object_models(Path(root) / "models")


def file_sha256(path: str | Path) -> str:
    """Hex sha256 of a file's bytes."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def package_versions() -> dict[str, str]:
    """Versions of the libraries that determine artifact contents."""
    import pydantic
    import scipy
    import torch

    return {
        "poselab": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "pydantic": pydantic.VERSION,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


def write_run_manifest(
    artifact: str | Path, command: list[str], config_hash: str, seed: int, config: dict
) -> Path:
    """Write ``<artifact>.run.json`` describing how the artifact was produced."""
    artifact = Path(artifact)
    path = artifact.with_name(artifact.name + ".run.json")
    data = {
        "artifact": artifact.name,
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "config": config,
        "versions": package_versions(),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
    return path


def write_csv(frame: pd.DataFrame, path: str | Path) -> Path:
    """Write a CSV with a fixed float format so reruns are byte-identical."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return path


CODEBOOK_MAGIC = b"PLUT"
CODEBOOK_VERSION = 1
_CODEBOOK_HEADER = struct.Struct("<4sHII")


def _codebook_dtype(latent_dim: int) -> np.dtype:
    return np.dtype(
        [("object_id", "<i4"), ("mu", "<f4", (latent_dim,)), ("R", "<f8", (9,)), ("tz", "<f8")]
    )


def save_codebook_arrays(
    path: str | Path,
    mu: np.ndarray,
    object_ids: np.ndarray,
    rotations: np.ndarray,
    tz: np.ndarray,
) -> Path:
    """Binary codebook: header (magic, version, n, count) then fixed-size entries."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count, latent_dim = mu.shape
    entries = np.empty(count, dtype=_codebook_dtype(latent_dim))
    entries["object_id"] = object_ids
    entries["mu"] = mu
    entries["R"] = rotations.reshape(count, 9)
    entries["tz"] = tz
    with open(path, "wb") as f:
        f.write(_CODEBOOK_HEADER.pack(CODEBOOK_MAGIC, CODEBOOK_VERSION, latent_dim, count))
        f.write(entries.tobytes())
    return path


def load_codebook_arrays(path: str | Path) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Inverse of :func:`save_codebook_arrays`: (mu, object_ids, rotations, tz)."""
    path = Path(path)
    with open(path, "rb") as f:
        header = f.read(_CODEBOOK_HEADER.size)
        if len(header) < _CODEBOOK_HEADER.size:
            raise ParseError("truncated codebook header", path=str(path))
        magic, version, latent_dim, count = _CODEBOOK_HEADER.unpack(header)
        if magic != CODEBOOK_MAGIC:
            raise ParseError("not a codebook file", path=str(path))
        if version != CODEBOOK_VERSION:
            raise ParseError(f"unsupported codebook version {version}", path=str(path))
        dtype = _codebook_dtype(latent_dim)
        data = f.read()
    if len(data) != dtype.itemsize * count:
        raise ParseError("codebook size does not match its header", path=str(path))
    entries = np.frombuffer(data, dtype=dtype, count=count)
    return (
        entries["mu"].astype(np.float32),
        entries["object_id"].astype(np.int64),
        entries["R"].reshape(count, 3, 3).astype(float),
        entries["tz"].astype(float),
    )
