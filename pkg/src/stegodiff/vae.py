"""Variational autoencoder mapping 32x32 images to a compact latent grid.

The diffusion trajectories all run on the latent codes this module
produces. Encoder and decoder are small strided conv stacks with a fixed
downsampling factor of 4; training takes minutes on CPU at desk scale.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ImageTensor, SeededRng, clamp_pixels, load_state, save_state

LOG_VAR_MIN, LOG_VAR_MAX = -30.0, 20.0


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class LatentDistribution:
    """Diagonal Gaussian posterior over the latent grid."""

    mu: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_var = np.clip(
            np.asarray(self.log_var, dtype=np.float64), LOG_VAR_MIN, LOG_VAR_MAX
        )
        if self.mu.shape != self.log_var.shape:
            raise ValueError("mu and log_var must share shape")


class ConvVae(nn.Module):
    """Strided conv encoder/decoder, downsample factor 4."""

    def __init__(self, in_channels=3, latent_channels=4, width=64):
        super().__init__()
        self.latent_channels = latent_channels
        self.downsample_factor = 4
        self.encoder = nn.Sequential(
            nn.Conv2d(in_channels, width // 2, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width // 2, width, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(width, 2 * latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, width, 3, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(width, width // 2, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.ConvTranspose2d(width // 2, in_channels, 4, stride=2, padding=1),
        )

    def encode(self, x):
        h = self.encoder(x)
        mu, log_var = torch.chunk(h, 2, dim=1)
        return mu, torch.clamp(log_var, LOG_VAR_MIN, LOG_VAR_MAX)

    def decode(self, z):
        return torch.sigmoid(self.decoder(z))


@dataclass
class VaeParams:
    model: ConvVae
    manifest: dict = field(default_factory=dict)

    @property
    def latent_channels(self):
        return self.model.latent_channels

    @property
    def downsample_factor(self):
        return self.model.downsample_factor

    def save(self, dir_path):
        dir_path = Path(dir_path)
        arrays = {k: v.detach().numpy() for k, v in self.model.state_dict().items()}
        save_state(dir_path, arrays)
        meta = dict(self.manifest)
        meta["arch"] = {
            "in_channels": self.model.encoder[0].in_channels,
            "latent_channels": self.model.latent_channels,
            "width": self.model.encoder[2].out_channels,
        }
        (dir_path / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, dir_path) -> "VaeParams":
        dir_path = Path(dir_path)
        meta = json.loads((dir_path / "manifest.json").read_text())
        arch = meta.pop("arch")
        model = ConvVae(**arch)
        state = {k: torch.from_numpy(v) for k, v in load_state(dir_path).items()}
        model.load_state_dict(state)
        model.eval()
        return cls(model=model, manifest=meta)


def _check_divisible(x: ImageTensor, params: VaeParams):
    _, h, w = x.shape
    f = params.downsample_factor
    if h % f or w % f:
        raise ValueError(f"image dims {h}x{w} not divisible by downsample factor {f}")


def vae_encode(x: ImageTensor, params: VaeParams) -> LatentDistribution:
    _check_divisible(x, params)
    with torch.no_grad():
        t = torch.from_numpy(x.data[None]).float()
        mu, log_var = params.model.encode(t)
    return LatentDistribution(mu[0].numpy(), log_var[0].numpy())


def reparameterize(dist: LatentDistribution, eps: np.ndarray) -> np.ndarray:
    """z = mu + sigma * eps with sigma = exp(log_var / 2)."""
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != dist.mu.shape:
        raise ValueError(f"eps shape {eps.shape} != mu shape {dist.mu.shape}")
    return dist.mu + np.exp(0.5 * dist.log_var) * eps


def vae_decode(z: np.ndarray, params: VaeParams) -> ImageTensor:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 3 or z.shape[0] != params.latent_channels:
        raise ValueError(f"latent shape {z.shape} incompatible with params")
    with torch.no_grad():
        out = params.model.decode(torch.from_numpy(z[None]).float())[0].numpy()
    return ImageTensor(clamp_pixels(out.astype(np.float64)))


def kl_divergence(dist: LatentDistribution) -> float:
    """Closed-form KL(N(mu, sigma^2) || N(0, I)), averaged per dimension."""
    var = np.exp(dist.log_var)
    per_dim = 0.5 * (dist.mu**2 + var - 1.0 - dist.log_var)
    return float(per_dim.mean())


def vae_loss(x: ImageTensor, x_hat: ImageTensor, dist: LatentDistribution, kl_weight: float = 1e-3):
    """Reconstruction MSE plus weighted closed-form KL; components reported."""
    if x.shape != x_hat.shape:
        raise ValueError("x and x_hat shapes differ")
    recon = float(np.mean((x.data - x_hat.data) ** 2))
    kl = kl_divergence(dist)
    return {"loss": recon + kl_weight * kl, "recon": recon, "kl": kl}


def training_loss(model: ConvVae, batch: torch.Tensor, eps: torch.Tensor, kl_weight: float):
    """Differentiable loss used by the training loop and the gradient check."""
    mu, log_var = model.encode(batch)
    z = mu + torch.exp(0.5 * log_var) * eps
    x_hat = model.decode(z)
    recon = F.mse_loss(x_hat, batch)
    kl = 0.5 * (mu**2 + torch.exp(log_var) - 1.0 - log_var).mean()
    return recon + kl_weight * kl, recon, kl


@dataclass
class VaeTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 2e-3
    kl_weight: float = 1e-3
    latent_channels: int = 4
    width: int = 64
    val_fraction: float = 0.1


def train_vae(dataset, config: VaeTrainConfig, rng: SeededRng) -> VaeParams:
    """Train on labeled images; validation split is the fixed tail of the set."""
    if not dataset:
        raise ValueError("dataset must be non-empty")
    torch.manual_seed(rng.child("torch").torch_seed())

    images = np.stack([img.data for img in dataset]).astype(np.float32)
    n_val = max(1, int(len(images) * config.val_fraction))
    train_x = torch.from_numpy(images[:-n_val])
    val_x = torch.from_numpy(images[-n_val:])

    model = ConvVae(
        in_channels=images.shape[1],
        latent_channels=config.latent_channels,
        width=config.width,
    )
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    perm_rng = rng.child("shuffle")

    val_history = []
    for epoch in range(config.epochs):
        model.train()
        order = perm_rng.permutation(len(train_x))
        h_lat = images.shape[2] // model.downsample_factor
        w_lat = images.shape[3] // model.downsample_factor
        for start in range(0, len(train_x), config.batch_size):
            batch = train_x[order[start : start + config.batch_size]]
            eps = torch.randn(len(batch), config.latent_channels, h_lat, w_lat)
            loss, _, _ = training_loss(model, batch, eps, config.kl_weight)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            # validation scores use the posterior mean (eps = 0)
            zero_eps = torch.zeros(len(val_x), config.latent_channels, h_lat, w_lat)
            vloss, vrecon, _ = training_loss(model, val_x, zero_eps, config.kl_weight)
        val_history.append({"epoch": epoch, "loss": float(vloss), "recon": float(vrecon)})

    model.eval()
    manifest = {
        "trained": config.epochs > 0,
        "epochs": config.epochs,
        "seed": rng.seed,
        "stream_id": rng.stream_id,
        "dataset_size": len(dataset),
        "kl_weight": config.kl_weight,
        "val_history": val_history,
        "final_val_recon_mse": val_history[-1]["recon"] if val_history else None,
    }
    return VaeParams(model=model, manifest=manifest)
