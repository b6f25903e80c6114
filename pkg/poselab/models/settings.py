"""Run configuration models.

Every section rejects unknown keys. A run config file is JSON with the
sections below, all optional::

    {
      "seed": 0,
      "label_variant": "full",
      "generator": {"shapes": ["box4", "wedge", "lshape"], "images_per_object": 2000},
      "cvae": {"latent_dim": 256, "alpha": 0.1},
      "mlp": {"hidden_widths": [256, 128, 64, 32, 16]},
      "training": {"batch_size": 128, "max_epochs": 2000},
      "heads_training": {"max_epochs": 20000},
      "evaluation": {"bbox_jitter": 0.05},
      "ablation": {"alpha_values": [0, 0.1, 0.5, 1]}
    }
"""

import hashlib
import json
from enum import Enum
from pathlib import Path
from typing import Any, TypeVar

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from poselab.errors import ConfigError

MLP_HIDDEN_WIDTHS = (256, 128, 64, 32, 16)
CROP_SIZE = 128


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class LabelMode(str, Enum):
    """Where the one-hot label is injected inside the CVAE."""

    FULL = "full"  # every encoder block and every decoder conv layer
    INITIAL = "initial"  # first encoder layer and first decoder layer only


class LabelVariant(str, Enum):
    """Label-embedding ablation variants."""

    FULL = "full"
    ORIGINAL_CVAE = "original-cvae"
    NO_LABEL_MLP = "no-label-mlp"

    @property
    def mlp_uses_labels(self) -> bool:
        return self is not LabelVariant.NO_LABEL_MLP


class AblationAxis(str, Enum):
    """Axes the ablate command can sweep."""

    ALPHA = "alpha"
    LATENT_DIM = "n"
    LABEL_EMBEDDING = "label-embedding"


class GeneratorConfig(_Section):
    """Synthetic multi-object dataset generator settings."""

    shapes: list[str] = Field(
        default_factory=lambda: ["box4", "wedge", "lshape"], description="Object shape names"
    )
    images_per_object: int = Field(default=2000, gt=0, description="Train+val records per object")
    test_images_per_object: int = Field(default=200, gt=0, description="Test records per object")
    objects_per_scene: int = Field(default=3, gt=0)
    occluders_per_object: float = Field(default=0.6, ge=0, description="Mean occluders per object")
    clutter_items: int = Field(default=25, ge=0, description="Background clutter shapes per scene")
    image_width: int = Field(default=640, gt=0)
    image_height: int = Field(default=480, gt=0)
    fx: float = Field(default=572.4114, gt=0)
    fy: float = Field(default=573.5704, gt=0)
    px: float = Field(default=325.2611, ge=0)
    py: float = Field(default=242.0490, ge=0)
    tz_range: tuple[float, float] = (0.55, 1.1)
    object_size: float = Field(default=0.1, gt=0, description="Nominal object extent (metres)")
    val_fraction: float = Field(default=0.1, ge=0, lt=1)
    eval_points: int = Field(default=1000, gt=0, description="Surface points per evaluation model")
    seed: int = 0

    @field_validator("shapes")
    @classmethod
    def _at_least_two(cls, value: list[str]) -> list[str]:
        if len(value) < 2:
            raise ValueError("at least two object shapes are required")
        if len(set(value)) != len(value):
            raise ValueError("object shapes must be distinct")
        return value

    @field_validator("tz_range")
    @classmethod
    def _positive_range(cls, value: tuple[float, float]) -> tuple[float, float]:
        if not 0 < value[0] <= value[1]:
            raise ValueError("tz_range must satisfy 0 < low <= high")
        return value

    @model_validator(mode="after")
    def _principal_point_inside(self) -> "GeneratorConfig":
        if not (self.px < self.image_width and self.py < self.image_height):
            raise ValueError(
                f"principal point ({self.px}, {self.py}) must lie inside the "
                f"{self.image_width}x{self.image_height} image"
            )
        return self


class CvaeConfig(_Section):
    """Architecture and loss settings of the label-embedded CVAE."""

    latent_dim: int = Field(default=256, ge=1, description="Latent dimensionality n")
    num_classes: int | None = Field(default=None, ge=1, description="K; taken from the data")
    alpha: float = Field(default=0.1, ge=0, description="KL weight")
    label_mode: LabelMode = LabelMode.FULL
    encoder_width: int = Field(default=64, ge=1, description="Channels of the first ResNet stage")
    decoder_width: int = Field(default=256, ge=8, description="Channels of the 8x8 decoder seed")
    image_size: int = CROP_SIZE
    seed: int = 0

    @field_validator("image_size")
    @classmethod
    def _fixed_size(cls, value: int) -> int:
        if value != CROP_SIZE:
            raise ValueError(f"image_size is fixed at {CROP_SIZE}")
        return value


class MlpConfig(_Section):
    """Regression head settings."""

    hidden_widths: tuple[int, ...] = MLP_HIDDEN_WIDTHS
    use_labels: bool = True
    num_classes: int | None = Field(default=None, ge=1)

    @field_validator("hidden_widths")
    @classmethod
    def _fixed_widths(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if tuple(value) != MLP_HIDDEN_WIDTHS:
            raise ValueError(f"hidden_widths are fixed at {list(MLP_HIDDEN_WIDTHS)}")
        return tuple(value)


class TrainingSettings(_Section):
    """Optimiser and stopping schedule for the CVAE."""

    learning_rate: float = Field(default=1e-4, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = Field(default=1e-8, gt=0)
    weight_decay: float = Field(default=0.01, ge=0)
    batch_size: int = Field(default=128, gt=0)
    plateau_factor: float = Field(default=0.2, gt=0, lt=1)
    plateau_patience: int = Field(default=50, ge=0)
    min_lr: float = Field(default=1e-6, gt=0)
    stop_patience: int = Field(default=50, ge=0)
    max_epochs: int = Field(default=2000, gt=0)
    bbox_jitter: float = Field(default=0.05, ge=0, le=0.5)
    visibility_threshold: float = Field(default=0.10, ge=0, le=1)
    num_workers: int = Field(default=0, ge=0)


class HeadTrainingSettings(TrainingSettings):
    """Optimiser and stopping schedule for the regression heads (full batch)."""

    learning_rate: float = Field(default=3e-3, gt=0)
    plateau_patience: int = Field(default=500, ge=0)
    stop_patience: int = Field(default=1000, ge=0)
    max_epochs: int = Field(default=20000, gt=0)


class EvaluationSettings(_Section):
    """Test-time box perturbation and scoring options."""

    bbox_jitter: float = Field(default=0.0, ge=0, le=0.5, description="Stand-in for detector noise")
    jitter_seed: int = 0
    visibility_threshold: float = Field(default=0.10, ge=0, le=1)
    max_model_points: int = Field(default=5000, gt=0)
    subsample_seed: int = 0


class AblationSettings(_Section):
    """Values swept by the ablate command."""

    alpha_values: list[float] = Field(default_factory=lambda: [0.0, 0.1, 0.5, 1.0])
    latent_dims: list[int] = Field(default_factory=lambda: [32, 64, 128, 256, 512, 1024])
    label_variants: list[LabelVariant] = Field(default_factory=lambda: list(LabelVariant))
    parallel: bool = False


class PathsSettings(_Section):
    """Default locations; command-line flags take precedence."""

    data_dir: Path | None = None
    output_dir: Path = Path("runs")


class RunConfig(_Section):
    """Complete, validated configuration of one run."""

    seed: int = 0
    label_variant: LabelVariant = LabelVariant.FULL
    paths: PathsSettings = Field(default_factory=PathsSettings)
    generator: GeneratorConfig = Field(default_factory=GeneratorConfig)
    cvae: CvaeConfig = Field(default_factory=CvaeConfig)
    mlp: MlpConfig = Field(default_factory=MlpConfig)
    training: TrainingSettings = Field(default_factory=TrainingSettings)
    heads_training: HeadTrainingSettings = Field(default_factory=HeadTrainingSettings)
    evaluation: EvaluationSettings = Field(default_factory=EvaluationSettings)
    ablation: AblationSettings = Field(default_factory=AblationSettings)

    def resolved_cvae(self, num_classes: int) -> CvaeConfig:
        """CVAE config with K, seed and the label variant applied."""
        return self.cvae.model_copy(
            update={
                "num_classes": num_classes,
                "seed": self.seed,
                "label_mode": LabelMode.INITIAL
                if self.label_variant is LabelVariant.ORIGINAL_CVAE
                else self.cvae.label_mode,
            }
        )

    def resolved_mlp(self, num_classes: int) -> MlpConfig:
        """MLP config with K and the label variant applied."""
        return self.mlp.model_copy(
            update={
                "num_classes": num_classes,
                "use_labels": self.mlp.use_labels and self.label_variant.mlp_uses_labels,
            }
        )

    def config_hash(self) -> str:
        """sha256 of the canonical JSON form."""
        canonical = json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


T = TypeVar("T", bound=BaseModel)


def parse_settings(model: type[T], data: Any) -> T:
    """Validate ``data`` against ``model``, raising ConfigError on any violation."""
    if isinstance(data, model):
        return data
    try:
        return model.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}"
            for err in exc.errors()
        )
        raise ConfigError(f"invalid {model.__name__}: {problems}") from exc


def load_run_config(path: str | Path | None) -> RunConfig:
    """Load and validate a JSON run config; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    return parse_settings(RunConfig, data)
