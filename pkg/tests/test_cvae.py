"""Tests for the label-embedded CVAE."""

import numpy as np
import pytest
import torch
from torch.utils.data import DataLoader

from poselab.errors import CheckpointMismatch, ConfigError, ShapeMismatch
from poselab.models.settings import CvaeConfig, LabelMode
from poselab.services.crops import CropDataset
from poselab.services.cvae import (
    LabelEmbeddedCVAE,
    LatentCode,
    elbo_loss,
    embed_label_as_maps,
    load_cvae,
    save_cvae,
)
from poselab.services.training import train_cvae


def _batch(batch_size: int = 2, num_classes: int = 3, seed: int = 0):
    generator = torch.Generator().manual_seed(seed)
    images = torch.rand(batch_size, 3, 128, 128, generator=generator)
    labels = torch.nn.functional.one_hot(
        torch.arange(batch_size) % num_classes, num_classes
    ).float()
    return images, labels


def test_embed_label_single_map():
    features = torch.zeros(3, 4, 4)
    out = embed_label_as_maps(features, torch.tensor([0.0, 1.0]))
    assert out.shape == (5, 4, 4)
    assert torch.all(out[3] == 0) and torch.all(out[4] == 1)


def test_embed_label_batched():
    features = torch.randn(2, 8, 8, 8)
    labels = torch.tensor([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    out = embed_label_as_maps(features, labels)
    assert out.shape == (2, 11, 8, 8)
    assert torch.equal(out[:, :8], features)
    assert torch.all(out[0, 8] == 1) and torch.all(out[1, 10] == 1)
    assert torch.all(out[0, 10] == 0)


def test_embed_label_rejects_wrong_class_count():
    with pytest.raises(ShapeMismatch):
        embed_label_as_maps(torch.zeros(1, 3, 4, 4), torch.zeros(1, 2), num_classes=3)
    with pytest.raises(ShapeMismatch):
        embed_label_as_maps(torch.zeros(2, 3, 4, 4), torch.zeros(3, 2))


@pytest.mark.parametrize("latent_dim", [1, 8, 1024])
def test_encode_decode_shapes(latent_dim):
    config = CvaeConfig(latent_dim=latent_dim, num_classes=3, encoder_width=4, decoder_width=16)
    model = LabelEmbeddedCVAE(config).eval()
    images, labels = _batch()
    code = model.encode(images, labels)
    assert code.mu.shape == code.log_var.shape == (2, latent_dim)
    with torch.no_grad():
        x_prime, _ = model(images, labels)
    assert x_prime.shape == (2, 3, 128, 128)


def test_decoder_output_in_unit_range(small_cvae_config):
    model = LabelEmbeddedCVAE(small_cvae_config).eval()
    _, labels = _batch(4)
    generator = torch.Generator().manual_seed(1)
    z = 5.0 * torch.randn(4, small_cvae_config.latent_dim, generator=generator)
    with torch.no_grad():
        out = model.decode(z, labels)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_encode_rejects_bad_shapes(small_cvae_config):
    model = LabelEmbeddedCVAE(small_cvae_config)
    images, labels = _batch()
    with pytest.raises(ShapeMismatch):
        model.encode(images[:, :, :64, :64], labels)
    with pytest.raises(ShapeMismatch):
        model.encode(images, labels[:, :2])
    with pytest.raises(ShapeMismatch):
        model.decode(torch.zeros(2, small_cvae_config.latent_dim + 1), labels)


def test_config_requires_classes_and_decoder_width():
    with pytest.raises(ConfigError):
        LabelEmbeddedCVAE(CvaeConfig(latent_dim=8, encoder_width=4, decoder_width=16))
    with pytest.raises(ConfigError):
        LabelEmbeddedCVAE(
            CvaeConfig(latent_dim=8, num_classes=2, encoder_width=4, decoder_width=12)
        )


def test_encoding_is_deterministic_in_eval_mode(small_cvae_config):
    model = LabelEmbeddedCVAE(small_cvae_config).eval()
    images, labels = _batch()
    with torch.no_grad():
        first = model.encode(images, labels)
        second = model.encode(images, labels)
    assert torch.equal(first.mu, second.mu)
    assert torch.equal(first.log_var, second.log_var)


def test_label_changes_the_encoding(small_cvae_config):
    model = LabelEmbeddedCVAE(small_cvae_config).eval()
    images, _ = _batch(1)
    with torch.no_grad():
        a = model.encode(images, torch.tensor([[1.0, 0.0, 0.0]])).mu
        b = model.encode(images, torch.tensor([[0.0, 1.0, 0.0]])).mu
    assert not torch.allclose(a, b)


def test_full_mode_adds_label_channels_to_every_layer():
    w, d, k = 4, 16, 3
    full = LabelEmbeddedCVAE(
        CvaeConfig(latent_dim=8, num_classes=k, encoder_width=w, decoder_width=d)
    )
    initial = LabelEmbeddedCVAE(
        CvaeConfig(latent_dim=8, num_classes=k, encoder_width=w, decoder_width=d,
                   label_mode=LabelMode.INITIAL)
    )

    def count(model):
        return sum(p.numel() for p in model.parameters())

    # first conv of each residual block (outputs w, w, 2w, 2w, 4w, 4w, 8w, 8w)
    # and every decoder conv (outputs d/2, d/4, d/8, 3) gain k input channels
    expected = 9 * k * 30 * w + 9 * k * (d // 2 + d // 4 + d // 8 + 3)
    assert count(full) - count(initial) == expected


def test_reparameterize_collapses_to_mean():
    mu = torch.randn(4, 5)
    code = LatentCode(mu, torch.full_like(mu, -30.0))
    z = LabelEmbeddedCVAE.reparameterize(code, torch.Generator().manual_seed(0))
    assert torch.allclose(z, mu, atol=1e-5)


def test_reparameterize_moments():
    code = LatentCode(torch.zeros(100_000, 1), torch.zeros(100_000, 1))
    z = LabelEmbeddedCVAE.reparameterize(code, torch.Generator().manual_seed(0))
    assert abs(z.mean().item()) < 4 / np.sqrt(100_000)
    assert abs(z.var().item() - 1.0) < 4 * np.sqrt(2 / 100_000)


def test_reparameterize_gradient_wrt_mean_is_identity():
    log_var = torch.randn(1, 3)

    def sample(mu):
        code = LatentCode(mu, log_var)
        return LabelEmbeddedCVAE.reparameterize(code, torch.Generator().manual_seed(0))

    jacobian = torch.autograd.functional.jacobian(sample, torch.randn(1, 3))
    assert torch.allclose(jacobian.reshape(3, 3), torch.eye(3))


def test_elbo_examples():
    x = torch.zeros(1, 3, 2, 2)
    zero = LatentCode(torch.zeros(1, 1), torch.zeros(1, 1))
    loss = elbo_loss(x, x, zero, alpha=1.0)
    assert loss.total.item() == 0.0 and loss.kl.item() == 0.0

    shifted = LatentCode(torch.ones(1, 1), torch.zeros(1, 1))
    assert elbo_loss(x, x, shifted, alpha=1.0).kl.item() == pytest.approx(0.5)
    assert elbo_loss(x, x, shifted, alpha=0.2).total.item() == pytest.approx(0.1)

    x_hat = torch.ones(1, 3, 2, 2)
    loss = elbo_loss(x, x_hat, zero, alpha=0.0)
    assert loss.recon.item() == pytest.approx(12.0)


def test_elbo_shape_mismatch():
    code = LatentCode(torch.zeros(1, 2), torch.zeros(1, 2))
    with pytest.raises(ShapeMismatch):
        elbo_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5), code, 0.1)
    with pytest.raises(ShapeMismatch):
        elbo_loss(torch.zeros(1, 3), torch.zeros(1, 3), LatentCode(torch.zeros(1, 2),
                                                                   torch.zeros(1, 3)), 0.1)


def test_kl_matches_monte_carlo_estimate():
    rng = np.random.default_rng(0)
    draws, pairs = 100_000, 100
    misses = 0
    for _ in range(pairs):
        mu = rng.normal(0, 1.5, size=4)
        log_var = rng.uniform(-2, 1.5, size=4)
        code = LatentCode(torch.tensor(mu[None]), torch.tensor(log_var[None]))
        x = torch.zeros(1, 1)
        kl = elbo_loss(x, x, code, 1.0).kl.item()
        sigma = np.exp(0.5 * log_var)
        z = mu + sigma * rng.standard_normal((draws, 4))
        log_q = -0.5 * (((z - mu) / sigma) ** 2 + log_var)
        log_p = -0.5 * z**2
        samples = (log_q - log_p).sum(axis=1)
        misses += abs(samples.mean() - kl) >= 3 * samples.std() / np.sqrt(draws)
    # 0.27 misses expected at three standard errors
    assert misses <= 2


def test_elbo_gradients_match_finite_differences():
    generator = torch.Generator().manual_seed(0)
    x_prime = torch.rand(2, 3, 4, 4, generator=generator, dtype=torch.float64)
    x_hat = torch.rand(2, 3, 4, 4, generator=generator, dtype=torch.float64)
    mu = torch.randn(2, 5, generator=generator, dtype=torch.float64, requires_grad=True)
    log_var = torch.randn(2, 5, generator=generator, dtype=torch.float64, requires_grad=True)
    x_prime.requires_grad_()

    def total(x, m, v):
        return elbo_loss(x, x_hat, LatentCode(m, v), 0.3).total

    assert torch.autograd.gradcheck(total, (x_prime, mu, log_var))


def test_checkpoint_round_trip(tmp_path, small_cvae_config):
    model = LabelEmbeddedCVAE(small_cvae_config).eval()
    path = save_cvae(model, tmp_path / "cvae.pt", seed=0)
    loaded = load_cvae(path)
    images, labels = _batch()
    with torch.no_grad():
        assert torch.equal(model.encode(images, labels).mu, loaded.encode(images, labels).mu)
    assert loaded.config == model.config


def test_loading_a_foreign_checkpoint_fails(tmp_path):
    path = tmp_path / "other.pt"
    torch.save({"format": "something-else"}, path)
    with pytest.raises(CheckpointMismatch):
        load_cvae(path)


def _occluded_val_batch(toy_run):
    manifest = toy_run.dataset.manifest
    records = [r for r in manifest.val if r.visibility < 0.95]
    assert records
    dataset = CropDataset(manifest, records, toy_run.cvae.classes)
    return next(iter(DataLoader(dataset, batch_size=len(dataset))))


@pytest.mark.slow
def test_decoder_removes_occluders(toy_run):
    model = toy_run.cvae.model
    batch = _occluded_val_batch(toy_run)
    with torch.no_grad():
        decoded = model.decode(model.encode(batch["image"], batch["label"]).mu, batch["label"])
    target = batch["target"]
    decoded_error = ((decoded - target) ** 2).sum(dim=(1, 2, 3))
    input_error = ((batch["image"] - target) ** 2).sum(dim=(1, 2, 3))
    assert (decoded_error < input_error).float().mean().item() >= 0.8


@pytest.mark.slow
def test_label_changes_the_trained_encoding(toy_run):
    model = toy_run.cvae.model
    batch = _occluded_val_batch(toy_run)
    other = torch.roll(batch["label"], shifts=1, dims=1)
    with torch.no_grad():
        a = model.encode(batch["image"], batch["label"]).mu
        b = model.encode(batch["image"], other).mu
    assert not torch.allclose(a, b, atol=1e-4)


@pytest.mark.slow
def test_zero_alpha_shrinks_the_posterior_variance(toy_run):
    final = {}
    for alpha in (0.0, 1.0):
        config = toy_run.config.model_copy(
            update={
                "cvae": toy_run.config.cvae.model_copy(update={"alpha": alpha}),
                "training": toy_run.config.training.model_copy(update={"max_epochs": 15}),
            },
            deep=True,
        )
        log = train_cvae(toy_run.dataset.manifest, config).log
        final[alpha] = log["val_mean_var"].iloc[-1]
        if alpha == 0.0:
            assert final[alpha] < log["val_mean_var"].iloc[0]
    assert final[0.0] < final[1.0]
