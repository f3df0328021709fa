"""Key-conditioned deterministic diffusion: the steganographic core.

A prompt is embedded token-by-token, injected through cross-attention into
a small conv noise predictor, and combined with the unconditional branch
via classifier-free guidance. Hiding runs the deterministic update from
the secret latent toward noise under the private key, then back to a clean
latent under the public key; revealing swaps the key order. All
trajectories use sigma = 0, so each single step is algebraically
invertible.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from .core import SeededRng, load_state, save_state
from .keygen import KeyPrompt
from .vae import TrainingDivergedError


# ---------------------------------------------------------------------------
# Noise schedule

@dataclass
class NoiseSchedule:
    """Linear beta schedule with cumulative alpha-bar products.

    alpha_bars has length T_train + 1 with alpha_bars[0] = 1 (clean data);
    alpha_bars[t] is the product of (1 - beta_i) over the first t steps.
    """

    T_train: int
    betas: np.ndarray
    alpha_bars: np.ndarray


def make_schedule(T_train: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T_train < 1:
        raise ValueError("T_train must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, T_train)
    alpha_bars = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(T_train=T_train, betas=betas, alpha_bars=alpha_bars)


def ddim_timesteps(T_train: int, ddim_steps: int) -> np.ndarray:
    """Evenly spaced strictly increasing timestep subsequence starting at 0."""
    if not (1 <= ddim_steps <= T_train):
        raise ValueError(f"ddim_steps must be in [1, {T_train}], got {ddim_steps}")
    return np.floor(np.arange(ddim_steps) * (T_train / ddim_steps)).astype(int)


# ---------------------------------------------------------------------------
# Key embedding

@dataclass
class TextEmbedding:
    """Per-token embedding vectors; the null embedding is all zeros."""

    vectors: np.ndarray  # (n_tokens, d_embed)
    is_null: bool = False


class HashEmbedder:
    """Deterministic token embedder: each token hashes to a unit vector.

    Stands in for a pretrained text encoder; distinct tokens map to
    near-orthogonal directions at this dimension, which is all the
    steganography needs from the conditioning.
    """

    def __init__(self, d_embed: int = 64, salt: int = 0):
        self.d_embed = d_embed
        self.salt = salt

    def embed_token(self, token: str) -> np.ndarray:
        digest = hashlib.blake2b(
            f"{self.salt}|{token}".encode("utf-8"), digest_size=16
        ).digest()
        key = np.frombuffer(digest, dtype=np.uint64)
        gen = np.random.Generator(np.random.Philox(key=key))
        v = gen.standard_normal(self.d_embed)
        return v / np.linalg.norm(v)

    def null(self) -> TextEmbedding:
        return TextEmbedding(np.zeros((1, self.d_embed)), is_null=True)

    def __call__(self, key: KeyPrompt | None) -> TextEmbedding:
        return embed_key(key, self)


def embed_key(key: KeyPrompt | None, embedder: HashEmbedder) -> TextEmbedding:
    """Embed a key prompt; None requests the null (unconditional) embedding."""
    if key is None:
        return embedder.null()
    vectors = np.stack([embedder.embed_token(tok) for tok in key.tokens])
    return TextEmbedding(vectors, is_null=False)


def cross_attention(z_feat: np.ndarray, emb: TextEmbedding, w_q, w_k, w_v) -> np.ndarray:
    """softmax(Q K^T / sqrt(d)) V with Q from latent features, K/V from tokens.

    z_feat: (N, d_in) latent positions; w_q: (d, d_in); w_k, w_v: (d, d_embed).
    """
    w_q, w_k, w_v = (np.asarray(m, dtype=np.float64) for m in (w_q, w_k, w_v))
    q = z_feat @ w_q.T  # (N, d)
    k = emb.vectors @ w_k.T  # (T, d)
    v = emb.vectors @ w_v.T  # (T, d)
    d = q.shape[1]
    scores = q @ k.T / math.sqrt(d)
    scores -= scores.max(axis=1, keepdims=True)
    weights = np.exp(scores)
    weights /= weights.sum(axis=1, keepdims=True)
    return weights @ v


# ---------------------------------------------------------------------------
# Noise predictor network

def _timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


class ResBlock(nn.Module):
    def __init__(self, channels, time_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(8, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(8, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, channels)
        self.act = nn.SiLU()

    def forward(self, h, t_emb):
        r = self.conv1(self.act(self.norm1(h)))
        r = r + self.time_proj(t_emb)[:, :, None, None]
        r = self.conv2(self.act(self.norm2(r)))
        return h + r


class TokenCrossAttention(nn.Module):
    """Single-head cross-attention from spatial positions onto key tokens."""

    def __init__(self, query_channels, d_embed, out_channels):
        super().__init__()
        self.w_q = nn.Linear(query_channels, out_channels, bias=False)
        self.w_k = nn.Linear(d_embed, out_channels, bias=False)
        self.w_v = nn.Linear(d_embed, out_channels, bias=False)

    def forward(self, feat, emb, mask):
        # feat: (B, C, H, W); emb: (B, L, d_embed); mask: (B, L) bool
        b, c, h, w = feat.shape
        q = self.w_q(feat.flatten(2).transpose(1, 2))  # (B, N, d)
        k = self.w_k(emb)
        v = self.w_v(emb)
        scores = q @ k.transpose(1, 2) / math.sqrt(q.shape[-1])  # (B, N, L)
        scores = scores.masked_fill(~mask[:, None, :], float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        out = weights @ v  # (B, N, d)
        return out.transpose(1, 2).reshape(b, -1, h, w)


class NoisePredictor(nn.Module):
    """Small conv backbone with two downsampling levels plus key attention.

    By default the attention output is added to the backbone's noise
    prediction; with attn_in_backbone=True it is injected at the
    bottleneck features instead.
    """

    def __init__(self, latent_channels=4, width=64, d_embed=64, time_dim=64,
                 attn_in_backbone=False):
        super().__init__()
        self.latent_channels = latent_channels
        self.d_embed = d_embed
        self.attn_in_backbone = attn_in_backbone
        self.time_mlp = nn.Sequential(
            nn.Linear(time_dim, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim)
        )
        self.time_dim = time_dim

        self.conv_in = nn.Conv2d(latent_channels, width, 3, padding=1)
        self.down1 = ResBlock(width, time_dim)
        self.pool1 = nn.Conv2d(width, width, 3, stride=2, padding=1)
        self.down2 = ResBlock(width, time_dim)
        self.pool2 = nn.Conv2d(width, width, 3, stride=2, padding=1)
        self.mid = ResBlock(width, time_dim)
        self.unpool2 = nn.ConvTranspose2d(width, width, 4, stride=2, padding=1)
        self.up2 = ResBlock(width, time_dim)
        self.unpool1 = nn.ConvTranspose2d(width, width, 4, stride=2, padding=1)
        self.up1 = ResBlock(width, time_dim)
        self.conv_out = nn.Conv2d(width, latent_channels, 3, padding=1)

        if attn_in_backbone:
            self.attn = TokenCrossAttention(width, d_embed, width)
        else:
            self.attn = TokenCrossAttention(latent_channels, d_embed, latent_channels)

    def forward(self, z, t, emb, mask):
        t_emb = self.time_mlp(_timestep_embedding(t, self.time_dim))
        h = self.conv_in(z)
        h1 = self.down1(h, t_emb)
        h2 = self.down2(self.pool1(h1), t_emb)
        m = self.mid(self.pool2(h2), t_emb)
        if self.attn_in_backbone:
            m = m + self.attn(m, emb, mask)
        u2 = self.up2(self.unpool2(m) + h2, t_emb)
        u1 = self.up1(self.unpool1(u2) + h1, t_emb)
        out = self.conv_out(u1)
        if not self.attn_in_backbone:
            out = out + self.attn(z, emb, mask)
        return out


@dataclass
class NoisePredictorParams:
    model: NoisePredictor
    embedder: HashEmbedder
    manifest: dict = field(default_factory=dict)

    def save(self, dir_path):
        dir_path = Path(dir_path)
        arrays = {k: v.detach().numpy() for k, v in self.model.state_dict().items()}
        save_state(dir_path, arrays)
        meta = dict(self.manifest)
        meta["arch"] = {
            "latent_channels": self.model.latent_channels,
            "width": self.model.conv_in.out_channels,
            "d_embed": self.model.d_embed,
            "time_dim": self.model.time_dim,
            "attn_in_backbone": self.model.attn_in_backbone,
        }
        meta["embedder"] = {"d_embed": self.embedder.d_embed, "salt": self.embedder.salt}
        (dir_path / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, dir_path) -> "NoisePredictorParams":
        dir_path = Path(dir_path)
        meta = json.loads((dir_path / "manifest.json").read_text())
        model = NoisePredictor(**meta.pop("arch"))
        state = {k: torch.from_numpy(v) for k, v in load_state(dir_path).items()}
        model.load_state_dict(state)
        model.eval()
        embedder = HashEmbedder(**meta.pop("embedder"))
        return cls(model=model, embedder=embedder, manifest=meta)


def _emb_batch(emb: TextEmbedding, batch: int):
    vectors = torch.from_numpy(np.asarray(emb.vectors, dtype=np.float32))
    e = vectors[None].expand(batch, -1, -1)
    mask = torch.ones(batch, vectors.shape[0], dtype=torch.bool)
    return e, mask


def predict_noise(z: np.ndarray, t: int, emb: TextEmbedding,
                  params: NoisePredictorParams) -> np.ndarray:
    """Conditional (or, with the null embedding, unconditional) noise estimate."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 3
    zb = z[None] if single else z
    with torch.no_grad():
        zt = torch.from_numpy(zb).float()
        e, mask = _emb_batch(emb, zt.shape[0])
        tt = torch.full((zt.shape[0],), int(t), dtype=torch.long)
        out = params.model(zt, tt, e, mask).numpy().astype(np.float64)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# DDIM updates

@dataclass
class GuidanceConfig:
    beta: float = 2.0
    ddim_steps: int = 50
    sigma: float = 0.0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.ddim_steps < 1:
            raise ValueError("ddim_steps must be >= 1")


def cfg_combine(eps_uncond, eps_cond, beta: float):
    """eps_uncond + beta * (eps_cond - eps_uncond)."""
    return eps_uncond + beta * (eps_cond - eps_uncond)


def _check_abar(*values):
    for a in values:
        if not (0.0 < a <= 1.0):
            raise ValueError(f"alpha_bar values must lie in (0, 1], got {a}")


def ddim_forward_step(z_t, abar_t: float, abar_next: float, eps_hat):
    """Deterministic step toward noise (lower alpha_bar)."""
    _check_abar(abar_t, abar_next)
    z0_pred = (z_t - math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(abar_t)
    return math.sqrt(abar_next) * z0_pred + math.sqrt(1.0 - abar_next) * eps_hat


def ddim_reverse_step(z_t, abar_t: float, abar_prev: float, eps_hat,
                      sigma_t: float = 0.0, rng: SeededRng | None = None):
    """Denoising step toward data; stochastic only when sigma_t > 0."""
    _check_abar(abar_t, abar_prev)
    direction_sq = 1.0 - abar_prev - sigma_t**2
    if direction_sq < 0:
        raise ValueError(f"1 - abar_prev - sigma^2 = {direction_sq} < 0")
    z0_pred = (z_t - math.sqrt(1.0 - abar_t) * eps_hat) / math.sqrt(abar_t)
    out = math.sqrt(abar_prev) * z0_pred + math.sqrt(direction_sq) * eps_hat
    if sigma_t > 0:
        if rng is None:
            raise ValueError("sigma_t > 0 requires an rng")
        out = out + sigma_t * rng.standard_normal(np.shape(z_t))
    return out


def _guided_eps(z: torch.Tensor, t: int, cond, uncond, model, beta: float) -> torch.Tensor:
    tt = torch.full((z.shape[0],), int(t), dtype=torch.long)
    eps_u = model(z, tt, *_expand(uncond, z.shape[0]))
    eps_c = model(z, tt, *_expand(cond, z.shape[0]))
    return cfg_combine(eps_u, eps_c, beta)


def _expand(embmask, batch):
    e, mask = embmask
    return e.expand(batch, -1, -1), mask.expand(batch, -1)


def _prepare_embeddings(key: KeyPrompt | None, params: NoisePredictorParams):
    cond = embed_key(key, params.embedder)
    uncond = params.embedder.null()
    cond_t = _emb_batch(cond, 1)
    uncond_t = _emb_batch(uncond, 1)
    return cond_t, uncond_t


def ddim_invert(z0: np.ndarray, key: KeyPrompt | None, params: NoisePredictorParams,
                schedule: NoiseSchedule, cfg: GuidanceConfig) -> np.ndarray:
    """Run the deterministic update from a clean latent to its deep-noise
    counterpart at the last timestep of the subsequence."""
    if cfg.sigma != 0.0:
        raise ValueError("inversion requires sigma = 0")
    z0 = np.asarray(z0, dtype=np.float64)
    single = z0.ndim == 3
    taus = ddim_timesteps(schedule.T_train, cfg.ddim_steps)
    cond, uncond = _prepare_embeddings(key, params)
    z = torch.from_numpy(z0[None] if single else z0).float()
    with torch.no_grad():
        for i in range(len(taus) - 1):
            t, t_next = int(taus[i]), int(taus[i + 1])
            eps = _guided_eps(z, t, cond, uncond, params.model, cfg.beta)
            z = ddim_forward_step(
                z, schedule.alpha_bars[t], schedule.alpha_bars[t_next], eps
            )
    out = z.numpy().astype(np.float64)
    return out[0] if single else out


def ddim_sample(zT: np.ndarray, key: KeyPrompt | None, params: NoisePredictorParams,
                schedule: NoiseSchedule, cfg: GuidanceConfig) -> np.ndarray:
    """Run the denoising update from the deep-noise latent back to a clean one."""
    if cfg.sigma != 0.0:
        raise ValueError("steganographic sampling requires sigma = 0")
    zT = np.asarray(zT, dtype=np.float64)
    single = zT.ndim == 3
    taus = ddim_timesteps(schedule.T_train, cfg.ddim_steps)
    cond, uncond = _prepare_embeddings(key, params)
    z = torch.from_numpy(zT[None] if single else zT).float()
    with torch.no_grad():
        for i in range(len(taus) - 1, 0, -1):
            t, t_prev = int(taus[i]), int(taus[i - 1])
            eps = _guided_eps(z, t, cond, uncond, params.model, cfg.beta)
            z = ddim_reverse_step(
                z, schedule.alpha_bars[t], schedule.alpha_bars[t_prev], eps
            )
    out = z.numpy().astype(np.float64)
    return out[0] if single else out


def hide(z_s: np.ndarray, k_priv: KeyPrompt, k_pub: KeyPrompt,
         params: NoisePredictorParams, schedule: NoiseSchedule,
         cfg: GuidanceConfig) -> np.ndarray:
    """Secret latent -> stego latent: invert under the private key, then
    sample under the public key."""
    if k_priv.text == k_pub.text:
        raise ValueError("private and public keys must differ")
    z_T = ddim_invert(z_s, k_priv, params, schedule, cfg)
    return ddim_sample(z_T, k_pub, params, schedule, cfg)


def reveal(z_stego: np.ndarray, k_pub: KeyPrompt, k_priv: KeyPrompt | None,
           params: NoisePredictorParams, schedule: NoiseSchedule,
           cfg: GuidanceConfig) -> np.ndarray:
    """Stego latent -> recovered secret latent (key order swapped).

    k_priv may be None to model a receiver lacking the private key; the
    final denoising then runs unconditioned.
    """
    z_T = ddim_invert(z_stego, k_pub, params, schedule, cfg)
    return ddim_sample(z_T, k_priv, params, schedule, cfg)


# ---------------------------------------------------------------------------
# Training

@dataclass
class DiffusionTrainConfig:
    epochs: int = 120
    batch_size: int = 64
    lr: float = 5e-4
    lr_min: float = 5e-5
    ema_decay: float = 0.0
    cond_dropout: float = 0.1
    width: int = 64
    d_embed: int = 64
    attn_in_backbone: bool = False
    val_fraction: float = 0.1


def _pad_embeddings(embs: list[TextEmbedding], d_embed: int):
    max_len = max(e.vectors.shape[0] for e in embs)
    batch = len(embs)
    out = torch.zeros(batch, max_len, d_embed)
    mask = torch.zeros(batch, max_len, dtype=torch.bool)
    for i, e in enumerate(embs):
        n = e.vectors.shape[0]
        out[i, :n] = torch.from_numpy(np.asarray(e.vectors, dtype=np.float32))
        mask[i, :n] = True
    return out, mask


def train_noise_predictor(latents, keys, schedule: NoiseSchedule,
                          config: DiffusionTrainConfig, rng: SeededRng) -> NoisePredictorParams:
    """epsilon-prediction training with per-sample conditioning dropout.

    latents: array (N, C, H, W) from the trained VAE; keys: one KeyPrompt
    per latent.
    """
    latents = np.asarray(latents, dtype=np.float32)
    if len(latents) != len(keys):
        raise ValueError("latents and keys must align")
    torch.manual_seed(rng.child("torch").torch_seed())

    embedder = HashEmbedder(d_embed=config.d_embed)
    embeddings = [embed_key(k, embedder) for k in keys]
    null = embedder.null()

    n_val = max(1, int(len(latents) * config.val_fraction))
    train_idx = np.arange(len(latents) - n_val)
    val_idx = np.arange(len(latents) - n_val, len(latents))

    model = NoisePredictor(
        latent_channels=latents.shape[1],
        width=config.width,
        d_embed=config.d_embed,
        attn_in_backbone=config.attn_in_backbone,
    )
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    lr_sched = torch.optim.lr_scheduler.CosineAnnealingLR(
        opt, T_max=max(config.epochs, 1), eta_min=config.lr_min
    )
    # Bias-corrected EMA weights give a smoother predictor, which cuts the
    # discretization error the deterministic trajectories accumulate
    ema = {k: torch.zeros_like(v) if v.dtype.is_floating_point else v.detach().clone()
           for k, v in model.state_dict().items()}
    ema_updates = 0
    x_all = torch.from_numpy(latents)
    abars = torch.from_numpy(schedule.alpha_bars).float()
    draw = rng.child("draws")

    def _batch_loss(idx, train: bool):
        x0 = x_all[idx]
        t = torch.from_numpy(np.asarray(draw.integers(1, schedule.T_train + 1, len(idx))))
        eps = torch.from_numpy(draw.standard_normal(x0.shape).astype(np.float32))
        a = abars[t][:, None, None, None]
        z_t = a.sqrt() * x0 + (1 - a).sqrt() * eps
        embs = []
        for j in idx:
            if train and draw.uniform() < config.cond_dropout:
                embs.append(null)
            else:
                embs.append(embeddings[j])
        e, mask = _pad_embeddings(embs, config.d_embed)
        pred = model(z_t, t, e, mask)
        return ((pred - eps) ** 2).mean()

    val_history = []
    for epoch in range(config.epochs):
        model.train()
        order = rng.child("shuffle", epoch).permutation(len(train_idx))
        for start in range(0, len(train_idx), config.batch_size):
            idx = train_idx[order[start : start + config.batch_size]]
            loss = _batch_loss(idx, train=True)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if config.ema_decay > 0:
                with torch.no_grad():
                    ema_updates += 1
                    for k, v in model.state_dict().items():
                        if v.dtype.is_floating_point:
                            ema[k].mul_(config.ema_decay).add_(v, alpha=1 - config.ema_decay)
                        else:
                            ema[k] = v.detach().clone()
        lr_sched.step()
        model.eval()
        with torch.no_grad():
            vloss = float(_batch_loss(val_idx, train=False))
        val_history.append({"epoch": epoch, "eps_mse": vloss})

    if config.epochs > 0 and config.ema_decay > 0 and ema_updates > 0:
        correction = 1.0 - config.ema_decay**ema_updates
        corrected = {k: (v / correction if v.dtype.is_floating_point else v)
                     for k, v in ema.items()}
        model.load_state_dict(corrected)
        model.eval()
        with torch.no_grad():
            val_history.append({"epoch": "ema", "eps_mse": float(_batch_loss(val_idx, train=False))})
    model.eval()
    manifest = {
        "trained": config.epochs > 0,
        "epochs": config.epochs,
        "seed": rng.seed,
        "stream_id": rng.stream_id,
        "n_latents": len(latents),
        "T_train": schedule.T_train,
        "cond_dropout": config.cond_dropout,
        "val_history": val_history,
    }
    return NoisePredictorParams(model=model, embedder=embedder, manifest=manifest)
