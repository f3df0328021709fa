"""Image quality metrics: MSE, PSNR, windowed SSIM, and a perceptual
feature distance.

The perceptual distance follows the layered deep-feature formulation with
a self-contained extractor: a fixed-seed random conv stack, which keeps
the metric deterministic without pretrained weights. Its role here is
ordering reconstructions, not matching published absolute values; an
external extractor can be plugged in through LpipsConfig.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ImageTensor, MAX_PIXEL

PSNR_CAP_DB = 100.0
_ZERO_MSE = 1e-10


def _paired(x: ImageTensor, y: ImageTensor):
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x.data, y.data


def mse(x: ImageTensor, y: ImageTensor) -> float:
    a, b = _paired(x, y)
    return float(np.mean((a - b) ** 2))


def psnr(x: ImageTensor, y: ImageTensor, max_i: float = MAX_PIXEL) -> float:
    """10 log10(max_i^2 / MSE), capped at 100 dB for (near-)zero error."""
    err = mse(x, y)
    if err < _ZERO_MSE:
        return PSNR_CAP_DB
    return 10.0 * math.log10(max_i**2 / err)


@dataclass
class SsimConfig:
    window: int = 11
    k1: float = 0.01
    k2: float = 0.03
    L: float = MAX_PIXEL

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")

    @property
    def c1(self):
        return (self.k1 * self.L) ** 2

    @property
    def c2(self):
        return (self.k2 * self.L) ** 2


def ssim(x: ImageTensor, y: ImageTensor, cfg: SsimConfig | None = None) -> float:
    """Mean per-patch SSIM over uniform sliding windows, averaged across
    channels. Patch statistics use the biased (1/n) variance."""
    cfg = cfg or SsimConfig()
    a, b = _paired(x, y)
    _, h, w = a.shape
    if h < cfg.window or w < cfg.window:
        raise ValueError(f"image {h}x{w} smaller than window {cfg.window}")

    win = (cfg.window, cfg.window)
    values = []
    for c in range(a.shape[0]):
        pa = sliding_window_view(a[c], win).reshape(-1, cfg.window**2)
        pb = sliding_window_view(b[c], win).reshape(-1, cfg.window**2)
        mu_a = pa.mean(axis=1)
        mu_b = pb.mean(axis=1)
        var_a = pa.var(axis=1)
        var_b = pb.var(axis=1)
        cov = (pa * pb).mean(axis=1) - mu_a * mu_b
        num = (2 * mu_a * mu_b + cfg.c1) * (2 * cov + cfg.c2)
        den = (mu_a**2 + mu_b**2 + cfg.c1) * (var_a + var_b + cfg.c2)
        values.append(num / den)
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# Perceptual feature distance

@dataclass
class LpipsConfig:
    extractor: str = "seeded-conv"
    layer_weights: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    seed: int = 1234

    def __post_init__(self):
        if not self.layer_weights:
            raise ValueError("need at least one layer weight")
        if any(w < 0 for w in self.layer_weights):
            raise ValueError("layer weights must be >= 0")


class SeededConvExtractor:
    """Three random strided conv layers with fixed weights from a seed."""

    CHANNELS = (16, 32, 64)

    def __init__(self, in_channels: int = 3, seed: int = 1234):
        gen = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
        self.kernels = []
        c_in = in_channels
        for c_out in self.CHANNELS:
            w = gen.standard_normal((c_out, c_in, 3, 3)) / math.sqrt(c_in * 9)
            self.kernels.append(w)
            c_in = c_out

    def features(self, img: np.ndarray) -> list[np.ndarray]:
        h = img
        feats = []
        for w in self.kernels:
            h = _conv2d_stride2(h, w)
            h = np.maximum(h, 0.0)
            feats.append(h)
        return feats


def _conv2d_stride2(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # x: (C_in, H, W); w: (C_out, C_in, 3, 3); pad 1, stride 2
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    patches = sliding_window_view(xp, (3, 3), axis=(1, 2))[:, ::2, ::2]  # (C_in,H',W',3,3)
    return np.einsum("chwij,ocij->ohw", patches, w)


def lpips_distance(x: ImageTensor, y: ImageTensor, cfg: LpipsConfig | None = None,
                   extractor=None) -> float:
    """Weighted sum over layers of the mean squared difference between
    unit-normalized per-position feature vectors."""
    cfg = cfg or LpipsConfig()
    a, b = _paired(x, y)
    if extractor is None:
        if cfg.extractor != "seeded-conv":
            raise ValueError(f"extractor backend {cfg.extractor!r} not configured")
        extractor = SeededConvExtractor(in_channels=a.shape[0], seed=cfg.seed)
    fa = extractor.features(a)
    fb = extractor.features(b)
    if len(cfg.layer_weights) > len(fa):
        raise ValueError("more layer weights than extractor layers")
    total = 0.0
    for w_l, la, lb in zip(cfg.layer_weights, fa, fb):
        na = _unit_normalize(la)
        nb = _unit_normalize(lb)
        total += w_l * float(np.mean(np.sum((na - nb) ** 2, axis=0)))
    return total


def _unit_normalize(feat: np.ndarray) -> np.ndarray:
    norm = np.sqrt(np.sum(feat**2, axis=0, keepdims=True))
    return feat / (norm + 1e-10)
