"""Training loops for the CVAE and the regression heads.

Both stages use AdamW with a ReduceLROnPlateau schedule on the validation
loss. A run stops once the learning rate has reached its floor and the
validation loss has not improved for ``stop_patience`` epochs, or after
``max_epochs``. The weights of the best validation epoch are kept.
"""

import copy
import logging
import math
import random
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch
from torch.utils.data import DataLoader

from poselab.errors import DataError, NumericalError
from poselab.models.dataset import DatasetManifest, ManifestRecord
from poselab.models.settings import RunConfig, TrainingSettings
from poselab.services.crops import CropDataset, class_index, filter_by_visibility
from poselab.services.cvae import LabelEmbeddedCVAE, elbo_loss, encode_dataset
from poselab.services.geometry import projective_centre, rotation_to_6d
from poselab.services.regression import (
    HeadKind,
    LabelEmbeddedMlp,
    PoseRegressor,
    bbox_features,
    head_inputs,
    mlp_forward,
)

logger = logging.getLogger(__name__)

STOP_LR_FLOOR = "lr_floor_patience"
STOP_MAX_EPOCHS = "max_epochs"


def seed_everything(seed: int) -> None:
    """Seed python, numpy and torch generators."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


@dataclass
class PlateauStopper:
    """Tracks the best validation loss and decides when to stop."""

    stop_patience: int
    min_lr: float
    best: float = math.inf
    best_epoch: int = 0
    stale_epochs: int = 0

    def update(self, loss: float, epoch: int) -> bool:
        """Record an epoch's loss; True when it is a new best."""
        if loss < self.best:
            self.best, self.best_epoch, self.stale_epochs = loss, epoch, 0
            return True
        self.stale_epochs += 1
        return False

    def should_stop(self, lr: float) -> bool:
        at_floor = lr <= self.min_lr * (1.0 + 1e-6)
        return at_floor and self.stale_epochs >= self.stop_patience


def _optimiser(
    parameters, settings: TrainingSettings
) -> tuple[torch.optim.Optimizer, torch.optim.lr_scheduler.ReduceLROnPlateau]:
    optimiser = torch.optim.AdamW(
        parameters,
        lr=settings.learning_rate,
        betas=settings.betas,
        eps=settings.eps,
        weight_decay=settings.weight_decay,
    )
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimiser,
        mode="min",
        factor=settings.plateau_factor,
        patience=settings.plateau_patience,
        min_lr=settings.min_lr,
    )
    return optimiser, scheduler


def _check_finite(value: float, what: str, epoch: int) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"{what} became {value} at epoch {epoch}")


def training_records(
    manifest: DatasetManifest, threshold: float
) -> tuple[list[ManifestRecord], list[ManifestRecord]]:
    """Train and val records above the visibility threshold."""
    train = filter_by_visibility(manifest.train, threshold)
    val = filter_by_visibility(manifest.val, threshold)
    if not train:
        raise DataError(f"no training records with visibility >= {threshold}")
    if not val:
        logger.warning("no validation records; monitoring the training loss instead")
    logger.info("%d train / %d val records after visibility filtering", len(train), len(val))
    return train, val


@dataclass
class CvaeTrainingResult:
    model: LabelEmbeddedCVAE
    log: pd.DataFrame
    best_epoch: int
    stop_reason: str
    classes: dict[int, int] = field(default_factory=dict)


def train_cvae(
    manifest: DatasetManifest, config: RunConfig, device: str | torch.device = "cpu"
) -> CvaeTrainingResult:
    """Train the label-embedded CVAE on clean reconstruction targets.

    Args:
        manifest: dataset with train and val splits carrying clean targets
        config: run configuration (cvae, training and seed sections are used)
        device: torch device

    Returns:
        the best-validation model, the per-epoch log and the stop reason
    """
    settings = config.training
    train, val = training_records(manifest, settings.visibility_threshold)
    classes = class_index(manifest.object_ids)
    cvae_config = config.resolved_cvae(len(classes))

    seed_everything(config.seed)
    model = LabelEmbeddedCVAE(cvae_config).to(device)
    optimiser, scheduler = _optimiser(model.parameters(), settings)
    stopper = PlateauStopper(settings.stop_patience, settings.min_lr)

    train_set = CropDataset(manifest, train, classes, settings.bbox_jitter, config.seed)
    val_set = CropDataset(manifest, val, classes) if val else None
    loader = DataLoader(
        train_set,
        batch_size=settings.batch_size,
        shuffle=True,
        num_workers=settings.num_workers,
        generator=torch.Generator().manual_seed(config.seed),
    )
    alpha = cvae_config.alpha
    rows = []
    best_state = copy.deepcopy(model.state_dict())
    stop_reason = STOP_MAX_EPOCHS

    for epoch in range(1, settings.max_epochs + 1):
        train_set.set_epoch(epoch)
        model.train()
        sums = {"recon": 0.0, "kl": 0.0}
        for batch in loader:
            image, label = batch["image"].to(device), batch["label"].to(device)
            x_prime, code = model(image, label)
            loss = elbo_loss(x_prime, batch["target"].to(device), code, alpha)
            optimiser.zero_grad()
            loss.total.backward()
            optimiser.step()
            sums["recon"] += loss.recon.item()
            sums["kl"] += loss.kl.item()
        train_recon = sums["recon"] / len(train_set)
        train_kl = sums["kl"] / len(train_set)
        _check_finite(train_recon + train_kl, "training loss", epoch)

        if val_set is not None:
            val_recon, val_kl, val_var = _validate_cvae(
                model, val_set, settings, config.seed, device
            )
        else:
            val_recon, val_kl, val_var = train_recon, train_kl, float("nan")
        val_total = val_recon + alpha * val_kl
        _check_finite(val_total, "validation loss", epoch)

        scheduler.step(val_total)
        lr = optimiser.param_groups[0]["lr"]
        if stopper.update(val_total, epoch):
            best_state = copy.deepcopy(model.state_dict())
        done = stopper.should_stop(lr)
        if done:
            stop_reason = STOP_LR_FLOOR
        rows.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_recon": train_recon,
                "train_kl": train_kl,
                "val_recon": val_recon,
                "val_kl": val_kl,
                "val_total": val_total,
                "val_mean_var": val_var,
                "stop_reason": stop_reason if done or epoch == settings.max_epochs else "",
            }
        )
        logger.info(
            "cvae epoch %d: lr=%.2e train recon=%.4f kl=%.4f | val total=%.4f",
            epoch, lr, train_recon, train_kl, val_total,
        )
        if done:
            break

    model.load_state_dict(best_state)
    model.eval()
    logger.info("cvae stopped (%s); best epoch %d", stop_reason, stopper.best_epoch)
    return CvaeTrainingResult(model, pd.DataFrame(rows), stopper.best_epoch, stop_reason, classes)


@torch.no_grad()
def _validate_cvae(
    model: LabelEmbeddedCVAE,
    dataset: CropDataset,
    settings: TrainingSettings,
    seed: int,
    device: str | torch.device,
) -> tuple[float, float, float]:
    """Per-sample validation recon, KL and mean posterior variance."""
    model.eval()
    noise = torch.Generator().manual_seed(seed)
    recon = kl = var = 0.0
    for batch in DataLoader(dataset, batch_size=settings.batch_size, shuffle=False):
        image, label = batch["image"].to(device), batch["label"].to(device)
        x_prime, code = model(image, label, generator=noise)
        loss = elbo_loss(x_prime, batch["target"].to(device), code, 0.0)
        recon += loss.recon.item()
        kl += loss.kl.item()
        var += torch.exp(code.log_var).mean(dim=1).sum().item()
    count = len(dataset)
    return recon / count, kl / count, var / count


@dataclass
class HeadFeatures:
    """Frozen inputs and normalised targets of the head stage for one split."""

    mu: np.ndarray
    labels: np.ndarray
    boxes: np.ndarray
    targets: dict[HeadKind, np.ndarray]


def head_features(
    model: LabelEmbeddedCVAE,
    manifest: DatasetManifest,
    records: list[ManifestRecord],
    classes: dict[int, int],
    distance_scale: float,
    jitter: float = 0.0,
    seed: int = 0,
    device: str | torch.device = "cpu",
) -> HeadFeatures:
    """Encode ``records`` and build the rotation, centre and distance targets."""
    missing = [r.key for r in records if r.gt_pose is None]
    if missing:
        raise DataError(f"{len(missing)} record(s) lack ground-truth poses, e.g. {missing[0]}")
    dataset = CropDataset(manifest, records, classes, jitter, seed, with_targets=False)
    mu = encode_dataset(model, dataset, device=device)
    labels = np.zeros((len(records), len(classes)), dtype=np.float32)
    boxes = np.zeros((len(records), 4))
    rotation, centre, distance = [], [], []
    for i, record in enumerate(records):
        K = record.intrinsics
        labels[i, classes[record.object_id]] = 1.0
        boxes[i] = bbox_features(dataset.box(i), K.width, K.height)
        rotation.append(rotation_to_6d(record.gt_pose.R))
        c = projective_centre(record.gt_pose.t, K)
        centre.append([c.cx / K.width, c.cy / K.height])
        distance.append([record.gt_pose.t[2] / distance_scale])
    targets = {
        HeadKind.ROTATION: np.asarray(rotation, dtype=np.float32),
        HeadKind.CENTRE: np.asarray(centre, dtype=np.float32),
        HeadKind.DISTANCE: np.asarray(distance, dtype=np.float32),
    }
    return HeadFeatures(mu, labels, boxes, targets)


@dataclass
class HeadTrainingResult:
    regressor: PoseRegressor
    log: pd.DataFrame
    stop_reasons: dict[HeadKind, str]


def train_heads(
    manifest: DatasetManifest,
    model: LabelEmbeddedCVAE,
    config: RunConfig,
    device: str | torch.device = "cpu",
) -> HeadTrainingResult:
    """Train the rotation, centre and distance heads on frozen posterior means.

    Each head has its own optimiser and schedule and sees the whole
    training set in every update.
    """
    settings = config.heads_training
    train, val = training_records(manifest, settings.visibility_threshold)
    classes = class_index(manifest.object_ids)
    if len(classes) != model.num_classes:
        raise DataError(
            f"dataset has {len(classes)} objects but the CVAE was trained on {model.num_classes}"
        )
    missing = [r.key for r in train + val if r.gt_pose is None]
    if missing:
        raise DataError(f"{len(missing)} record(s) lack ground-truth poses, e.g. {missing[0]}")
    distance_scale = float(np.mean([r.gt_pose.t[2] for r in train]))
    first = train[0].intrinsics
    mlp_config = config.resolved_mlp(len(classes))
    regressor = PoseRegressor.build(
        mlp_config, model.latent_dim, distance_scale, (first.width, first.height)
    )

    train_data = head_features(
        model, manifest, train, classes, distance_scale, settings.bbox_jitter, config.seed, device
    )
    val_data = (
        head_features(model, manifest, val, classes, distance_scale, device=device)
        if val
        else None
    )
    frames, reasons = [], {}
    for offset, kind in enumerate(HeadKind):
        seed_everything(config.seed + offset)
        head = LabelEmbeddedMlp(
            model.latent_dim + kind.bbox_dim,
            kind.out_dim,
            len(classes),
            mlp_config.use_labels,
            mlp_config.hidden_widths,
        ).to(device)
        regressor.heads[kind] = head
        log, reasons[kind] = _train_head(kind, head, train_data, val_data, settings, device)
        frames.append(log)
    regressor.eval()
    return HeadTrainingResult(regressor, pd.concat(frames, ignore_index=True), reasons)


def _tensors(data: HeadFeatures, kind: HeadKind, device) -> tuple[torch.Tensor, ...]:
    features = torch.from_numpy(head_inputs(kind, data.mu, data.boxes)).to(device)
    labels = torch.from_numpy(data.labels).to(device)
    targets = torch.from_numpy(data.targets[kind]).to(device)
    return features, labels, targets


def _train_head(
    kind: HeadKind,
    head: torch.nn.Module,
    train: HeadFeatures,
    val: HeadFeatures | None,
    settings: TrainingSettings,
    device: str | torch.device,
) -> tuple[pd.DataFrame, str]:
    optimiser, scheduler = _optimiser(head.parameters(), settings)
    stopper = PlateauStopper(settings.stop_patience, settings.min_lr)
    x, y, target = _tensors(train, kind, device)
    val_tensors = _tensors(val, kind, device) if val is not None else None
    best_state = copy.deepcopy(head.state_dict())
    rows, stop_reason = [], STOP_MAX_EPOCHS
    for epoch in range(1, settings.max_epochs + 1):
        head.train()
        loss = torch.nn.functional.mse_loss(mlp_forward(head, x, y), target)
        optimiser.zero_grad()
        loss.backward()
        optimiser.step()
        train_loss = loss.item()
        _check_finite(train_loss, f"{kind.value} head loss", epoch)
        if val_tensors is not None:
            head.eval()
            with torch.no_grad():
                vx, vy, vt = val_tensors
                val_loss = torch.nn.functional.mse_loss(mlp_forward(head, vx, vy), vt).item()
        else:
            val_loss = train_loss
        scheduler.step(val_loss)
        lr = optimiser.param_groups[0]["lr"]
        if stopper.update(val_loss, epoch):
            best_state = copy.deepcopy(head.state_dict())
        done = stopper.should_stop(lr)
        if done:
            stop_reason = STOP_LR_FLOOR
        rows.append(
            {
                "head": kind.value,
                "epoch": epoch,
                "lr": lr,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "stop_reason": stop_reason if done or epoch == settings.max_epochs else "",
            }
        )
        if epoch % 100 == 0 or done:
            logger.info("%s head epoch %d: lr=%.2e train=%.6f val=%.6f",
                        kind.value, epoch, lr, train_loss, val_loss)
        if done:
            break
    head.load_state_dict(best_state)
    head.eval()
    logger.info("%s head stopped (%s); best epoch %d", kind.value, stop_reason, stopper.best_epoch)
    return pd.DataFrame(rows), stop_reason
