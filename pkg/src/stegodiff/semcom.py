"""Joint source-channel codec and the AWGN channel simulation.

Stego images are mapped straight to a fixed-length block of real channel
symbols (unit average power), pushed through additive Gaussian noise at a
configured SNR, and decoded back to pixels. Two codec architectures are
provided so the steganography stack can be exercised unchanged through
either.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .core import ImageTensor, SeededRng, clamp_pixels, load_state, save_state
from .vae import TrainingDivergedError

# SNRs at or above this are treated as a noiseless channel.
NOISELESS_SNR_DB = 60.0


@dataclass
class SymbolVector:
    symbols: np.ndarray

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.float64).ravel()

    @property
    def power(self) -> float:
        return float(np.mean(self.symbols**2))


@dataclass
class ChannelConfig:
    snr_db: float
    h: float = 1.0
    stream_tag: str = "channel"

    @property
    def noise_variance(self) -> float:
        if self.snr_db >= NOISELESS_SNR_DB:
            return 0.0
        return 10.0 ** (-self.snr_db / 10.0)


def awgn_channel(s: SymbolVector, cfg: ChannelConfig, rng: SeededRng) -> SymbolVector:
    """s' = h * s + n, with n ~ N(0, sigma_w^2) set by the SNR at unit power."""
    if not np.all(np.isfinite(s.symbols)):
        raise ValueError("channel input must be finite")
    var = cfg.noise_variance
    out = cfg.h * s.symbols
    if var > 0:
        out = out + np.sqrt(var) * rng.standard_normal(out.shape)
    return SymbolVector(out)


def _power_normalize(t: torch.Tensor) -> torch.Tensor:
    # exact unit average power per sample; invariant to positive scaling
    k = t.shape[1]
    norm = torch.linalg.vector_norm(t, dim=1, keepdim=True)
    return t * (k**0.5) / norm


class ConvJscc(nn.Module):
    """Conv autoencoder codec; `variant` picks the architecture.

    "a": two downsampling convs to an (k/64)-channel 8x8 grid.
    "b": deeper stack to a (k/16)-channel 4x4 grid.
    Both end with exact power normalization.
    """

    def __init__(self, image_size=32, in_channels=3, k=256, variant="a", width=32):
        super().__init__()
        self.image_size = image_size
        self.in_channels = in_channels
        self.k = k
        self.variant = variant
        self.width = width
        if variant == "a":
            grid = image_size // 4
            c_lat, err = divmod(k, grid * grid)
            self.enc = nn.Sequential(
                nn.Conv2d(in_channels, width, 3, stride=2, padding=1), nn.PReLU(),
                nn.Conv2d(width, width, 3, padding=1), nn.PReLU(),
                nn.Conv2d(width, c_lat, 3, stride=2, padding=1),
            )
            self.dec = nn.Sequential(
                nn.Conv2d(c_lat, width, 3, padding=1), nn.PReLU(),
                nn.ConvTranspose2d(width, width, 4, stride=2, padding=1), nn.PReLU(),
                nn.ConvTranspose2d(width, in_channels, 4, stride=2, padding=1),
            )
        elif variant == "b":
            grid = image_size // 8
            c_lat, err = divmod(k, grid * grid)
            self.enc = nn.Sequential(
                nn.Conv2d(in_channels, width, 3, stride=2, padding=1), nn.PReLU(),
                nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.PReLU(),
                nn.Conv2d(2 * width, 2 * width, 3, padding=1), nn.PReLU(),
                nn.Conv2d(2 * width, c_lat, 3, stride=2, padding=1),
            )
            self.dec = nn.Sequential(
                nn.Conv2d(c_lat, 2 * width, 3, padding=1), nn.PReLU(),
                nn.ConvTranspose2d(2 * width, 2 * width, 4, stride=2, padding=1), nn.PReLU(),
                nn.ConvTranspose2d(2 * width, width, 4, stride=2, padding=1), nn.PReLU(),
                nn.ConvTranspose2d(width, in_channels, 4, stride=2, padding=1),
            )
        else:
            raise ValueError(f"unknown codec variant {variant!r}")
        if err:
            raise ValueError(f"k={k} not divisible by the {grid}x{grid} symbol grid")
        self.grid = grid
        self.c_lat = c_lat

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        s = self.enc(x).flatten(1)
        return _power_normalize(s)

    def decode(self, s: torch.Tensor) -> torch.Tensor:
        h = s.reshape(-1, self.c_lat, self.grid, self.grid)
        return torch.sigmoid(self.dec(h))


@dataclass
class JsccParams:
    model: ConvJscc
    compression_ratio: Fraction
    snr_train: float
    manifest: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.model.k

    def save(self, dir_path):
        dir_path = Path(dir_path)
        arrays = {key: v.detach().numpy() for key, v in self.model.state_dict().items()}
        save_state(dir_path, arrays)
        meta = dict(self.manifest)
        meta["arch"] = {
            "image_size": self.model.image_size,
            "in_channels": self.model.in_channels,
            "k": self.model.k,
            "variant": self.model.variant,
            "width": self.model.width,
        }
        meta["compression_ratio"] = [
            self.compression_ratio.numerator,
            self.compression_ratio.denominator,
        ]
        meta["snr_train"] = self.snr_train
        (dir_path / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, dir_path) -> "JsccParams":
        dir_path = Path(dir_path)
        meta = json.loads((dir_path / "manifest.json").read_text())
        model = ConvJscc(**meta.pop("arch"))
        state = {k: torch.from_numpy(v) for k, v in load_state(dir_path).items()}
        model.load_state_dict(state)
        model.eval()
        num, den = meta.pop("compression_ratio")
        snr_train = meta.pop("snr_train")
        return cls(model=model, compression_ratio=Fraction(num, den),
                   snr_train=snr_train, manifest=meta)


def symbol_count(ratio: Fraction, channels: int, size: int) -> int:
    """Channel symbols per image; errors unless the ratio divides exactly."""
    total = Fraction(channels * size * size) * ratio
    if total.denominator != 1:
        raise ValueError(f"ratio {ratio} does not give an integer symbol count")
    return int(total)


def sem_encode(x_stego: ImageTensor, params: JsccParams) -> SymbolVector:
    c, h, w = x_stego.shape
    if (c, h, w) != (params.model.in_channels, params.model.image_size, params.model.image_size):
        raise ValueError(f"image shape {x_stego.shape} does not match codec")
    with torch.no_grad():
        s = params.model.encode(torch.from_numpy(x_stego.data[None]).float())
    return SymbolVector(s[0].numpy().astype(np.float64))


def sem_decode(s_prime: SymbolVector, params: JsccParams) -> ImageTensor:
    if s_prime.symbols.shape[0] != params.k:
        raise ValueError(f"expected {params.k} symbols, got {s_prime.symbols.shape[0]}")
    with torch.no_grad():
        x = params.model.decode(torch.from_numpy(s_prime.symbols[None]).float())
    return ImageTensor(clamp_pixels(x[0].numpy().astype(np.float64)))


@dataclass
class JsccTrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    variant: str = "a"
    width: int = 32
    val_fraction: float = 0.1


def train_jscc(dataset, snr_train: float, ratio: Fraction,
               config: JsccTrainConfig, rng: SeededRng) -> JsccParams:
    """End-to-end reconstruction training through the noisy channel."""
    if not dataset:
        raise ValueError("dataset must be non-empty")
    torch.manual_seed(rng.child("torch").torch_seed())
    images = np.stack([img.data for img in dataset]).astype(np.float32)
    size, channels = images.shape[2], images.shape[1]
    k = symbol_count(Fraction(ratio), channels, size)

    model = ConvJscc(image_size=size, in_channels=channels, k=k,
                     variant=config.variant, width=config.width)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    noise_std = float(np.sqrt(10.0 ** (-snr_train / 10.0)))

    n_val = max(1, int(len(images) * config.val_fraction))
    train_x = torch.from_numpy(images[:-n_val])
    val_x = torch.from_numpy(images[-n_val:])
    perm_rng = rng.child("shuffle")

    val_history = []
    for epoch in range(config.epochs):
        model.train()
        order = perm_rng.permutation(len(train_x))
        for start in range(0, len(train_x), config.batch_size):
            batch = train_x[order[start : start + config.batch_size]]
            s = model.encode(batch)
            s_noisy = s + noise_std * torch.randn_like(s)
            x_hat = model.decode(s_noisy)
            loss = ((x_hat - batch) ** 2).mean()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        model.eval()
        with torch.no_grad():
            s = model.encode(val_x)
            x_hat = model.decode(s + noise_std * torch.randn_like(s))
            vmse = float(((x_hat - val_x) ** 2).mean())
        val_history.append({"epoch": epoch, "mse": vmse})

    model.eval()
    manifest = {
        "trained": config.epochs > 0,
        "epochs": config.epochs,
        "seed": rng.seed,
        "stream_id": rng.stream_id,
        "dataset_size": len(dataset),
        "snr_train": snr_train,
        "k": k,
        "variant": config.variant,
        "val_history": val_history,
    }
    return JsccParams(model=model, compression_ratio=Fraction(ratio),
                      snr_train=snr_train, manifest=manifest)
