"""Label-embedded MLP pose heads and 6-DoF pose assembly.

Three heads read the CVAE posterior mean mu:

* rotation: (mu, label) -> 6D rotation representation
* centre:   (mu, w/W, h/H, bx/W, by/H, label) -> (cx/W, cy/H)
* distance: (mu, w/W, h/H, label) -> Tz / distance_scale

The translation follows from the centre and the distance through the
pinhole model.
"""

import logging
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from poselab.errors import (
    CheckpointMismatch,
    ConfigError,
    InvalidDistance,
    ParseError,
    ShapeMismatch,
)
from poselab.models.geometry import BoundingBox, CameraIntrinsics, Pose, ProjectiveCentre
from poselab.models.settings import MLP_HIDDEN_WIDTHS, MlpConfig, parse_settings
from poselab.services.geometry import backproject_centre, gram_schmidt_6d

logger = logging.getLogger(__name__)

MIN_DISTANCE = 1e-6
BUNDLE_FORMAT = "poselab-heads"
BUNDLE_VERSION = 1


class HeadKind(str, Enum):
    """The three regression heads."""

    ROTATION = "rotation"
    CENTRE = "centre"
    DISTANCE = "distance"

    @property
    def out_dim(self) -> int:
        return {"rotation": 6, "centre": 2, "distance": 1}[self.value]

    @property
    def bbox_dim(self) -> int:
        """Number of normalised box features the head reads."""
        return {"rotation": 0, "centre": 4, "distance": 2}[self.value]


class LabelEmbeddedMlp(nn.Module):
    """MLP that re-concatenates the one-hot label after every hidden layer.

    With ``use_labels=False`` the label is ignored everywhere and the layer
    widths lose the K extra inputs.
    """

    def __init__(
        self,
        in_features: int,
        out_dim: int,
        num_classes: int,
        use_labels: bool = True,
        hidden_widths: tuple[int, ...] = MLP_HIDDEN_WIDTHS,
    ):
        super().__init__()
        self.in_features = in_features
        self.num_classes = num_classes
        self.use_labels = use_labels
        extra = num_classes if use_labels else 0
        dims = [in_features] + list(hidden_widths)
        self.hidden = nn.ModuleList(nn.Linear(d + extra, w) for d, w in zip(dims[:-1], dims[1:]))
        self.out = nn.Linear(dims[-1] + extra, out_dim)

    @property
    def input_dims(self) -> list[int]:
        """Input width of every affine layer, first to last."""
        return [layer.in_features for layer in self.hidden] + [self.out.in_features]

    def forward(self, features: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        label = label.to(features.dtype)
        h = torch.cat([features, label], dim=1) if self.use_labels else features
        for layer in self.hidden:
            h = F.silu(layer(h))
            if self.use_labels:
                h = torch.cat([h, label], dim=1)
        return self.out(h)


def mlp_forward(
    head: LabelEmbeddedMlp, features: torch.Tensor, label: torch.Tensor
) -> torch.Tensor:
    """Run a head after checking the feature and label widths."""
    if features.dim() != 2 or features.shape[1] != head.in_features:
        raise ShapeMismatch(
            f"head expects {head.in_features} features, got {tuple(features.shape)}"
        )
    if label.dim() != 2 or label.shape != (features.shape[0], head.num_classes):
        raise ShapeMismatch(
            f"head expects ({features.shape[0]}, {head.num_classes}) labels, "
            f"got {tuple(label.shape)}"
        )
    return head(features, label)


def bbox_features(bbox: BoundingBox, width: int, height: int) -> np.ndarray:
    """(w/W, h/H, bx/W, by/H)."""
    return np.array([bbox.w / width, bbox.h / height, bbox.bx / width, bbox.by / height])


def head_inputs(kind: HeadKind, mu: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Concatenate mu with the box features ``kind`` reads.

    ``mu`` is (B, n) and ``boxes`` (B, 4) from :func:`bbox_features`.
    """
    return np.concatenate([mu, boxes[:, : kind.bbox_dim]], axis=1).astype(np.float32)


def assemble_pose(
    rotation: np.ndarray, centre: ProjectiveCentre, tz: float, K: CameraIntrinsics
) -> Pose:
    """Rotation plus the translation back-projected from (centre, tz)."""
    if not tz > 0:
        raise InvalidDistance(f"distance must be positive, got {tz}")
    return Pose.from_arrays(rotation, backproject_centre(centre, tz, K))


class PoseRegressor:
    """The three trained heads plus the constants that undo target normalisation."""

    def __init__(
        self,
        heads: dict[HeadKind, LabelEmbeddedMlp],
        config: MlpConfig,
        latent_dim: int,
        distance_scale: float,
        image_size: tuple[int, int],
    ):
        missing = set(HeadKind) - set(heads)
        if missing:
            raise ConfigError(f"missing heads: {sorted(k.value for k in missing)}")
        if not distance_scale > 0:
            raise ConfigError("distance_scale must be positive")
        self.heads = heads
        self.config = config
        self.latent_dim = latent_dim
        self.distance_scale = distance_scale
        self.image_size = image_size

    @classmethod
    def build(
        cls, config: MlpConfig, latent_dim: int, distance_scale: float, image_size: tuple[int, int]
    ) -> "PoseRegressor":
        """Untrained heads for a latent size and class count."""
        if config.num_classes is None:
            raise ConfigError("MLP heads need num_classes")
        heads = {
            kind: LabelEmbeddedMlp(
                latent_dim + kind.bbox_dim,
                kind.out_dim,
                config.num_classes,
                config.use_labels,
                config.hidden_widths,
            )
            for kind in HeadKind
        }
        return cls(heads, config, latent_dim, distance_scale, image_size)

    def to(self, device: str | torch.device) -> "PoseRegressor":
        for head in self.heads.values():
            head.to(device)
        return self

    def eval(self) -> "PoseRegressor":
        for head in self.heads.values():
            head.eval()
        return self

    @torch.no_grad()
    def _run(
        self, kind: HeadKind, mu: np.ndarray, boxes: np.ndarray, label: np.ndarray
    ) -> np.ndarray:
        head = self.heads[kind]
        device = next(head.parameters()).device
        features = torch.from_numpy(head_inputs(kind, mu, boxes)).to(device)
        labels = torch.as_tensor(label, dtype=torch.float32, device=device)
        return mlp_forward(head, features, labels).cpu().numpy().astype(float)

    def predict_rotation(self, mu: np.ndarray, label: np.ndarray) -> np.ndarray:
        """(B, 3, 3) rotations via Gram-Schmidt on the 6D output."""
        mu, label = np.atleast_2d(mu), np.atleast_2d(label)
        empty = np.zeros((len(mu), 4))
        raw = self._run(HeadKind.ROTATION, mu, empty, label)
        return np.stack([gram_schmidt_6d(r) for r in raw])

    def predict_centre(
        self, mu: np.ndarray, bbox: BoundingBox, label: np.ndarray, K: CameraIntrinsics
    ) -> ProjectiveCentre:
        """Projective centre in scene pixels."""
        boxes = bbox_features(bbox, K.width, K.height)[None]
        cx, cy = self._run(HeadKind.CENTRE, np.atleast_2d(mu), boxes, np.atleast_2d(label))[0]
        return ProjectiveCentre(cx=cx * K.width, cy=cy * K.height)

    def predict_distance(
        self, mu: np.ndarray, w: float, h: float, label: np.ndarray,
        image_size: tuple[int, int] | None = None,
    ) -> float:
        """Tz in metres, at least MIN_DISTANCE."""
        width, height = image_size or self.image_size
        boxes = np.array([[w / width, h / height, 0.0, 0.0]])
        raw = self._run(HeadKind.DISTANCE, np.atleast_2d(mu), boxes, np.atleast_2d(label))
        return max(float(raw[0, 0]) * self.distance_scale, MIN_DISTANCE)

    def predict(
        self, mu: np.ndarray, label: np.ndarray, bbox: BoundingBox, K: CameraIntrinsics
    ) -> Pose:
        """Full pose of one instance: three head passes and the pinhole back-projection."""
        rotation = self.predict_rotation(mu, label)[0]
        centre = self.predict_centre(mu, bbox, label, K)
        tz = self.predict_distance(mu, bbox.w, bbox.h, label, (K.width, K.height))
        return assemble_pose(rotation, centre, tz, K)


def save_heads(regressor: PoseRegressor, path: str | Path, cvae_sha256: str) -> Path:
    """Head bundle tied to the CVAE checkpoint it was trained on."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "format": BUNDLE_FORMAT,
            "version": BUNDLE_VERSION,
            "cvae_sha256": cvae_sha256,
            "mlp": regressor.config.model_dump(mode="json"),
            "latent_dim": regressor.latent_dim,
            "distance_scale": regressor.distance_scale,
            "image_size": list(regressor.image_size),
            "heads": {
                kind.value: {k: v.detach().cpu() for k, v in head.state_dict().items()}
                for kind, head in regressor.heads.items()
            },
        },
        path,
    )
    logger.info("saved head bundle %s", path)
    return path


def load_heads(
    path: str | Path, cvae_sha256: str | None = None, device: str | torch.device = "cpu"
) -> PoseRegressor:
    """Inverse of :func:`save_heads`; checks the CVAE hash when one is given."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError) as exc:
        raise ParseError(f"cannot read head bundle: {exc}", path=str(path)) from exc
    if not isinstance(payload, dict) or payload.get("format") != BUNDLE_FORMAT:
        raise CheckpointMismatch(f"{path} is not a head bundle")
    if payload.get("version") != BUNDLE_VERSION:
        raise CheckpointMismatch(f"{path}: unsupported bundle version {payload.get('version')}")
    if cvae_sha256 is not None and payload["cvae_sha256"] != cvae_sha256:
        raise CheckpointMismatch(f"{path} was trained on a different CVAE checkpoint")
    config = parse_settings(MlpConfig, payload["mlp"])
    regressor = PoseRegressor.build(
        config, int(payload["latent_dim"]), float(payload["distance_scale"]),
        tuple(payload["image_size"]),
    )
    for kind, head in regressor.heads.items():
        try:
            head.load_state_dict(payload["heads"][kind.value])
        except (KeyError, RuntimeError) as exc:
            raise CheckpointMismatch(f"{path}: bad {kind.value} head weights") from exc
    return regressor.to(device).eval()
