"""Label-embedded conditional variational autoencoder.

The encoder is a ResNet-18 style network with SiLU activations; the decoder
projects (z, label) to an 8x8 feature map and upsamples four times to
128x128. One-hot labels enter the networks as constant feature maps:

* ``LabelMode.FULL``: at the stem, at the input of every residual block and
  before every decoder convolution.
* ``LabelMode.INITIAL``: at the stem and at the decoder's dense input only.
"""

import logging
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.data import DataLoader, Dataset

from poselab.errors import CheckpointMismatch, ConfigError, ParseError, ShapeMismatch
from poselab.models.settings import CvaeConfig, LabelMode, parse_settings

logger = logging.getLogger(__name__)

LOG_VAR_LIMIT = 30.0
DECODER_SEED_SIZE = 8
CHECKPOINT_FORMAT = "poselab-cvae"
CHECKPOINT_VERSION = 1


class LatentCode(NamedTuple):
    """Posterior parameters (mu, log sigma^2), each (B, n)."""

    mu: torch.Tensor
    log_var: torch.Tensor


class ElboLoss(NamedTuple):
    total: torch.Tensor
    recon: torch.Tensor
    kl: torch.Tensor


def embed_label_as_maps(
    features: torch.Tensor, label: torch.Tensor, num_classes: int | None = None
) -> torch.Tensor:
    """Append one constant channel per class, channel k filled with ``label[k]``.

    Accepts a single (C, H, W) map with a (K,) label or a (B, C, H, W) batch
    with (B, K) labels.
    """
    if num_classes is not None and label.shape[-1] != num_classes:
        raise ShapeMismatch(f"label has {label.shape[-1]} entries, expected {num_classes}")
    if features.dim() == 3 and label.dim() == 1:
        maps = label.to(features.dtype)[:, None, None].expand(-1, *features.shape[1:])
        return torch.cat([features, maps], dim=0)
    if features.dim() != 4 or label.dim() != 2 or label.shape[0] != features.shape[0]:
        raise ShapeMismatch(
            f"cannot embed labels of shape {tuple(label.shape)} "
            f"into features of shape {tuple(features.shape)}"
        )
    maps = label.to(features.dtype)[:, :, None, None].expand(-1, -1, *features.shape[2:])
    return torch.cat([features, maps], dim=1)


class ResidualBlock(nn.Module):
    """Basic residual block; label maps widen the first convolution only."""

    def __init__(
        self, in_channels: int, out_channels: int, stride: int = 1, label_channels: int = 0
    ):
        super().__init__()
        self.label_channels = label_channels
        self.conv1 = nn.Conv2d(
            in_channels + label_channels, out_channels, 3, stride=stride, padding=1, bias=False
        )
        self.bn1 = nn.BatchNorm2d(out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_channels)
        if stride != 1 or in_channels != out_channels:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_channels, out_channels, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_channels),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        h = embed_label_as_maps(x, label) if self.label_channels else x
        h = F.silu(self.bn1(self.conv1(h)))
        h = self.bn2(self.conv2(h))
        return F.silu(h + self.shortcut(x))


class Encoder(nn.Module):
    """ResNet-18 layout: 7x7 stem, max-pool, four stages of two blocks."""

    def __init__(self, width: int, latent_dim: int, num_classes: int, mode: LabelMode):
        super().__init__()
        self.num_classes = num_classes
        block_labels = num_classes if mode is LabelMode.FULL else 0
        self.stem = nn.Conv2d(3 + num_classes, width, 7, stride=2, padding=3, bias=False)
        self.stem_bn = nn.BatchNorm2d(width)
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        widths = [width, 2 * width, 4 * width, 8 * width]
        blocks = []
        in_channels = width
        for stage, out_channels in enumerate(widths):
            stride = 1 if stage == 0 else 2
            blocks.append(ResidualBlock(in_channels, out_channels, stride, block_labels))
            blocks.append(ResidualBlock(out_channels, out_channels, 1, block_labels))
            in_channels = out_channels
        self.blocks = nn.ModuleList(blocks)
        self.fc_mu = nn.Linear(in_channels, latent_dim)
        self.fc_log_var = nn.Linear(in_channels, latent_dim)

    def forward(self, image: torch.Tensor, label: torch.Tensor) -> LatentCode:
        h = embed_label_as_maps(image, label, self.num_classes)
        h = self.pool(F.silu(self.stem_bn(self.stem(h))))
        for block in self.blocks:
            h = block(h, label)
        h = torch.flatten(F.adaptive_avg_pool2d(h, 1), 1)
        log_var = torch.clamp(self.fc_log_var(h), -LOG_VAR_LIMIT, LOG_VAR_LIMIT)
        return LatentCode(self.fc_mu(h), log_var)


class Decoder(nn.Module):
    """Dense projection to 8x8xd, then four upsample + conv layers d -> d/2 -> d/4 -> d/8 -> 3."""

    def __init__(self, width: int, latent_dim: int, num_classes: int, mode: LabelMode):
        super().__init__()
        self.width = width
        self.num_classes = num_classes
        self.layer_labels = num_classes if mode is LabelMode.FULL else 0
        self.fc = nn.Linear(latent_dim + num_classes, width * DECODER_SEED_SIZE**2)
        channels = [width, width // 2, width // 4, width // 8, 3]
        self.convs = nn.ModuleList(
            nn.Conv2d(c_in + self.layer_labels, c_out, 3, padding=1)
            for c_in, c_out in zip(channels[:-1], channels[1:])
        )

    def forward(self, z: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.fc(torch.cat([z, label.to(z.dtype)], dim=1)))
        h = h.view(-1, self.width, DECODER_SEED_SIZE, DECODER_SEED_SIZE)
        for i, conv in enumerate(self.convs):
            h = F.interpolate(h, scale_factor=2, mode="nearest")
            if self.layer_labels:
                h = embed_label_as_maps(h, label)
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.silu(h)
        return torch.sigmoid(h)


class LabelEmbeddedCVAE(nn.Module):
    """Encoder/decoder pair conditioned on one-hot class labels."""

    def __init__(self, config: CvaeConfig):
        super().__init__()
        if config.num_classes is None:
            raise ConfigError("CVAE needs num_classes")
        if config.decoder_width % 8:
            raise ConfigError("decoder_width must be a multiple of 8")
        self.config = config
        self.encoder = Encoder(
            config.encoder_width, config.latent_dim, config.num_classes, config.label_mode
        )
        self.decoder = Decoder(
            config.decoder_width, config.latent_dim, config.num_classes, config.label_mode
        )

    @property
    def num_classes(self) -> int:
        return self.config.num_classes

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def _check_inputs(self, image: torch.Tensor, label: torch.Tensor) -> None:
        size = self.config.image_size
        if image.dim() != 4 or tuple(image.shape[1:]) != (3, size, size):
            raise ShapeMismatch(
                f"expected (B, 3, {size}, {size}) images, got {tuple(image.shape)}"
            )
        if label.dim() != 2 or label.shape != (image.shape[0], self.num_classes):
            raise ShapeMismatch(
                f"expected ({image.shape[0]}, {self.num_classes}) labels, got {tuple(label.shape)}"
            )

    def encode(self, image: torch.Tensor, label: torch.Tensor) -> LatentCode:
        self._check_inputs(image, label)
        return self.encoder(image, label)

    @staticmethod
    def reparameterize(code: LatentCode, generator: torch.Generator | None = None) -> torch.Tensor:
        """z = mu + exp(log_var / 2) * eps, eps ~ N(0, I)."""
        if generator is None:
            eps = torch.randn_like(code.mu)
        else:
            eps = torch.randn(code.mu.shape, generator=generator, dtype=code.mu.dtype)
            eps = eps.to(code.mu.device)
        return code.mu + torch.exp(0.5 * code.log_var) * eps

    def decode(self, z: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.latent_dim:
            raise ShapeMismatch(f"expected (B, {self.latent_dim}) latents, got {tuple(z.shape)}")
        return self.decoder(z, label)

    def forward(
        self, image: torch.Tensor, label: torch.Tensor, generator: torch.Generator | None = None
    ) -> tuple[torch.Tensor, LatentCode]:
        code = self.encode(image, label)
        return self.decode(self.reparameterize(code, generator), label), code


def elbo_loss(
    x_prime: torch.Tensor, x_hat: torch.Tensor, code: LatentCode, alpha: float
) -> ElboLoss:
    """Negative ELBO: summed squared reconstruction error plus alpha x KL(q || N(0, I)).

    Args:
        x_prime: decoder output
        x_hat: clean reconstruction target
        code: posterior parameters the reconstruction was sampled from
        alpha: KL weight

    Returns:
        (total, recon, kl), each a scalar summed over the batch
    """
    if x_prime.shape != x_hat.shape:
        raise ShapeMismatch(
            f"reconstruction {tuple(x_prime.shape)} vs target {tuple(x_hat.shape)}"
        )
    if code.mu.shape != code.log_var.shape:
        raise ShapeMismatch("mu and log_var differ in shape")
    recon = torch.sum((x_hat - x_prime) ** 2)
    kl = -0.5 * torch.sum(1.0 + code.log_var - code.mu**2 - torch.exp(code.log_var))
    return ElboLoss(recon + alpha * kl, recon, kl)


@torch.no_grad()
def encode_dataset(
    model: LabelEmbeddedCVAE,
    dataset: Dataset,
    batch_size: int = 128,
    device: str | torch.device = "cpu",
) -> np.ndarray:
    """Posterior means of every item of a crop dataset, in dataset order."""
    model.eval()
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    means = []
    for batch in loader:
        code = model.encode(batch["image"].to(device), batch["label"].to(device))
        means.append(code.mu.cpu().numpy())
    return np.concatenate(means, axis=0)


def save_cvae(model: LabelEmbeddedCVAE, path: str | Path, seed: int) -> Path:
    """Self-describing checkpoint: format tag, config, seed and weights."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": model.config.model_dump(mode="json"),
            "seed": seed,
            "state_dict": state,
        },
        path,
    )
    logger.info("saved CVAE checkpoint %s", path)
    return path


def load_cvae(path: str | Path, device: str | torch.device = "cpu") -> LabelEmbeddedCVAE:
    """Rebuild a CVAE from :func:`save_cvae` output, in eval mode."""
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError) as exc:
        raise ParseError(f"cannot read checkpoint: {exc}", path=str(path)) from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointMismatch(f"{path} is not a CVAE checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointMismatch(f"{path}: unsupported checkpoint version {payload.get('version')}")
    config = parse_settings(CvaeConfig, payload["config"])
    model = LabelEmbeddedCVAE(config)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise CheckpointMismatch(f"{path}: weights do not match the stored config") from exc
    return model.to(device).eval()
