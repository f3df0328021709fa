"""End-to-end orchestration: the four-stage protocol, eavesdropper
evaluation, SNR sweeps, result tables, and plots.

Stage 1 derives the key pair, stage 2 hides the secret latent inside a
generated stego image, stage 3 pushes the stego image through the learned
codec and the noisy channel, stage 4 reveals the secret at the receiver.
Eavesdroppers rerun stage 4 with whatever key material their role grants.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import keygen
from .core import ImageTensor, RunConfig, SeededRng, gaussian_sample, save_array
from .diffusion import GuidanceConfig, NoisePredictorParams, NoiseSchedule, hide, reveal
from .keygen import (AccessError, KeyPair, KeyPrompt, KeyRegistry,
                     TemplateCaptioner, TemplateParaphraser,
                     extract_private_key, generate_public_key, sample_decoy_key)
from .metrics import LpipsConfig, SsimConfig, lpips_distance, mse, psnr, ssim
from .semcom import ChannelConfig, JsccParams, awgn_channel, sem_decode, sem_encode
from .vae import VaeParams, reparameterize, vae_decode, vae_encode

ROLES = ("legitimate", "eve1", "eve2", "eve3")

CSV_FIELDS = ["image_id", "role", "snr_train_db", "snr_test_db",
              "psnr_db", "ssim", "mse", "lpips", "stego_psnr_db", "seed"]


@dataclass
class ThreatModel:
    role: str
    wrong_key: KeyPrompt | None = None  # eve2's sampled decoy

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass
class ModelBundle:
    vae: VaeParams
    predictor: NoisePredictorParams
    schedule: NoiseSchedule
    jscc: JsccParams

    def manifests(self) -> dict:
        return {
            "vae": self.vae.manifest,
            "predictor": self.predictor.manifest,
            "jscc": self.jscc.manifest,
        }


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"pipeline failed in {stage}: {cause}")
        self.stage = stage


def make_key_pair(x_s: ImageTensor, session_id: str,
                  captioner=None, paraphraser=None) -> KeyPair:
    """Stage 1: private key from the secret image, public decoy from it."""
    captioner = captioner or TemplateCaptioner()
    paraphraser = paraphraser or TemplateParaphraser()
    k_priv = extract_private_key(x_s, captioner)
    k_pub = generate_public_key(k_priv, paraphraser)
    return KeyPair(private=k_priv, public=k_pub, session_id=session_id)


def _encode_latent(x: ImageTensor, vae: VaeParams, rng: SeededRng) -> np.ndarray:
    dist = vae_encode(x, vae)
    eps = gaussian_sample(rng, dist.mu.shape)
    return reparameterize(dist, eps)


def transmit(x_stego: ImageTensor, jscc: JsccParams, channel: ChannelConfig,
             rng: SeededRng) -> ImageTensor:
    """Stage 3: codec encode, noisy channel, codec decode."""
    s = sem_encode(x_stego, jscc)
    s_prime = awgn_channel(s, channel, rng)
    return sem_decode(s_prime, jscc)


def _score(x_ref: ImageTensor, x_out: ImageTensor,
           ssim_cfg: SsimConfig, lpips_cfg: LpipsConfig) -> dict:
    return {
        "psnr_db": psnr(x_ref, x_out),
        "ssim": ssim(x_ref, x_out, ssim_cfg),
        "mse": mse(x_ref, x_out),
        "lpips": lpips_distance(x_ref, x_out, lpips_cfg),
    }


def run_pipeline(x_s: ImageTensor, keys: KeyPair, models: ModelBundle,
                 channel: ChannelConfig, cfg: GuidanceConfig, rng: SeededRng,
                 image_id: int = 0, ssim_cfg: SsimConfig | None = None,
                 lpips_cfg: LpipsConfig | None = None) -> dict:
    """All four stages for one secret image, legitimate receiver."""
    ssim_cfg = ssim_cfg or SsimConfig()
    lpips_cfg = lpips_cfg or LpipsConfig()
    try:
        z_s = _encode_latent(x_s, models.vae, rng.child("tx-eps", image_id))
        z0_stego = hide(z_s, keys.private, keys.public, models.predictor,
                        models.schedule, cfg)
        x_stego = vae_decode(z0_stego, models.vae)
    except Exception as exc:
        raise StageError("stage-2 stego generation", exc) from exc
    try:
        x_hat_stego = transmit(x_stego, models.jscc, channel,
                               rng.child("channel", image_id, channel.snr_db))
    except Exception as exc:
        raise StageError("stage-3 transmission", exc) from exc
    try:
        z_stego = _encode_latent(x_hat_stego, models.vae, rng.child("rx-eps", image_id))
        z0_rec = reveal(z_stego, keys.public, keys.private, models.predictor,
                        models.schedule, cfg)
        x_rec = vae_decode(z0_rec, models.vae)
    except Exception as exc:
        raise StageError("stage-4 recovery", exc) from exc

    record = {"image_id": image_id, "role": "legitimate",
              "snr_test_db": channel.snr_db, "seed": rng.seed}
    record.update(_score(x_s, x_rec, ssim_cfg, lpips_cfg))
    record["stego_psnr_db"] = psnr(x_stego, x_hat_stego)
    record["images"] = {"stego": x_stego, "received_stego": x_hat_stego,
                        "recovered": x_rec}
    return record


def eval_threat(threat: ThreatModel, x_hat_stego: ImageTensor, x_s: ImageTensor,
                registry: KeyRegistry, session_id: str, models: ModelBundle,
                cfg: GuidanceConfig, rng: SeededRng,
                ssim_cfg: SsimConfig | None = None,
                lpips_cfg: LpipsConfig | None = None) -> dict:
    """A receiver role decodes the received stego with its granted keys."""
    ssim_cfg = ssim_cfg or SsimConfig()
    lpips_cfg = lpips_cfg or LpipsConfig()
    grant = registry.get(session_id, threat.role)

    if threat.role == "legitimate":
        x_out = _reveal_image(x_hat_stego, grant["public"], grant["private"],
                              models, cfg, rng)
    elif threat.role == "eve1":
        # no keys at all: the received stego image is the best available guess
        x_out = x_hat_stego
    elif threat.role == "eve2":
        true_private = registry.sessions[session_id].private
        wrong = threat.wrong_key
        if wrong is None:
            raise ValueError("eve2 requires a sampled wrong private key")
        if wrong.text == true_private.text:
            raise AccessError("eve2 may not hold the true private key")
        x_out = _reveal_image(x_hat_stego, grant["public"], wrong, models, cfg, rng)
    else:  # eve3: public key only, final denoising unconditioned
        x_out = _reveal_image(x_hat_stego, grant["public"], None, models, cfg, rng)

    record = {"role": threat.role}
    record.update(_score(x_s, x_out, ssim_cfg, lpips_cfg))
    record["images"] = {"recovered": x_out}
    return record


def _reveal_image(x_hat_stego: ImageTensor, k_pub: KeyPrompt,
                  k_priv: KeyPrompt | None, models: ModelBundle,
                  cfg: GuidanceConfig, rng: SeededRng) -> ImageTensor:
    z_stego = _encode_latent(x_hat_stego, models.vae, rng.child("rx-eps"))
    z0 = reveal(z_stego, k_pub, k_priv, models.predictor, models.schedule, cfg)
    return vae_decode(z0, models.vae)


# ---------------------------------------------------------------------------
# Batched evaluation (groups trajectories by shared key to cut model calls)

def evaluate_test_set(images: list[ImageTensor], models: ModelBundle,
                      snr_db: float, cfg: GuidanceConfig, rng: SeededRng,
                      roles=ROLES, decoy_table=None,
                      ssim_cfg: SsimConfig | None = None,
                      lpips_cfg: LpipsConfig | None = None) -> list[dict]:
    """Run the full protocol over a labeled test set for every role.

    Returns one record per (image, role). Diffusion trajectories are
    batched across images that share the same conditioning keys.
    """
    ssim_cfg = ssim_cfg or SsimConfig()
    lpips_cfg = lpips_cfg or LpipsConfig()
    decoy_table = decoy_table or dict(keygen.DEFAULT_DECOY_TABLE)
    captioner = TemplateCaptioner()
    paraphraser = TemplateParaphraser(decoy_table)

    pairs = {}
    for img in images:
        if img.label not in pairs:
            pairs[img.label] = make_key_pair(img, f"class-{img.label}",
                                             captioner, paraphraser)

    # stage 2: hide, batched per class
    x_stego = [None] * len(images)
    by_class: dict = {}
    for i, img in enumerate(images):
        by_class.setdefault(img.label, []).append(i)
    for label, idxs in sorted(by_class.items()):
        pair = pairs[label]
        z_s = np.stack([
            _encode_latent(images[i], models.vae, rng.child("tx-eps", i)) for i in idxs
        ])
        z0 = hide(z_s, pair.private, pair.public, models.predictor,
                  models.schedule, cfg)
        for j, i in enumerate(idxs):
            x_stego[i] = vae_decode(z0[j], models.vae)

    # stage 3: channel per image
    channel = ChannelConfig(snr_db=snr_db)
    x_hat = [
        transmit(x_stego[i], models.jscc, channel, rng.child("channel", i, snr_db))
        for i in range(len(images))
    ]

    # receiver latents are shared by every role that runs a reveal
    z_rx = np.stack([
        _encode_latent(x_hat[i], models.vae, rng.child("rx-eps", i, snr_db))
        for i in range(len(images))
    ])

    # eve2 decoys, one draw per image from a dedicated stream
    decoys = {}
    if "eve2" in roles:
        for i, img in enumerate(images):
            decoys[i] = sample_decoy_key(pairs[img.label].private, decoy_table,
                                         rng.child("eve2-decoy", i, snr_db))

    records = []
    for role in roles:
        recovered = [None] * len(images)
        if role == "eve1":
            recovered = x_hat
        else:
            # group by the (public, private) conditioning actually used
            groups: dict = {}
            for i, img in enumerate(images):
                pair = pairs[img.label]
                if role == "legitimate":
                    kp = pair.private
                elif role == "eve2":
                    kp = decoys[i]
                else:
                    kp = None
                key_id = (pair.public.text, kp.text if kp else None)
                groups.setdefault(key_id, ([], pair.public, kp))[0].append(i)
            for _, (idxs, k_pub, k_priv) in sorted(groups.items(), key=lambda kv: kv[0]):
                z0 = reveal(z_rx[idxs], k_pub, k_priv, models.predictor,
                            models.schedule, cfg)
                for j, i in enumerate(idxs):
                    recovered[i] = vae_decode(z0[j], models.vae)
        for i, img in enumerate(images):
            rec = {"image_id": i, "role": role, "snr_test_db": snr_db,
                   "seed": rng.seed}
            rec.update(_score(img, recovered[i], ssim_cfg, lpips_cfg))
            rec["stego_psnr_db"] = psnr(x_stego[i], x_hat[i])
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# SNR sweep, CSV, plots

def sweep_snr(images, vae, predictor, schedule, jscc_by_train_snr: dict,
              snr_test_list, cfg: GuidanceConfig, rng: SeededRng,
              roles=ROLES, out_dir=None) -> dict:
    """Cross product (snr_train x snr_test x role) over the test set.

    Missing codecs for a grid point are recorded as skipped, not fatal.
    """
    rows = []
    skipped = []
    for snr_train in sorted(jscc_by_train_snr):
        jscc = jscc_by_train_snr[snr_train]
        if jscc is None:
            skipped.extend((snr_train, s) for s in snr_test_list)
            continue
        models = ModelBundle(vae=vae, predictor=predictor, schedule=schedule, jscc=jscc)
        for snr_test in sorted(snr_test_list):
            point_rng = rng.child("grid", snr_train, snr_test)
            recs = evaluate_test_set(images, models, snr_test, cfg, point_rng, roles)
            for r in recs:
                r["snr_train_db"] = snr_train
                rows.append(r)
    rows.sort(key=lambda r: (r["snr_train_db"], r["snr_test_db"], r["role"], r["image_id"]))
    result = {"rows": rows, "skipped": skipped}
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "results.csv").write_bytes(rows_to_csv_bytes(rows))
        manifest = {
            "seed": rng.seed,
            "stream_id": rng.stream_id,
            "guidance": {"beta": cfg.beta, "ddim_steps": cfg.ddim_steps, "sigma": cfg.sigma},
            "snr_train_list": sorted(jscc_by_train_snr),
            "snr_test_list": sorted(snr_test_list),
            "roles": list(roles),
            "n_images": len(images),
            "skipped": skipped,
            "models": {
                "vae": vae.manifest,
                "predictor": predictor.manifest,
                "jscc": {str(k): (v.manifest if v else None)
                         for k, v in jscc_by_train_snr.items()},
            },
        }
        (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return result


def rows_to_csv_bytes(rows: list[dict]) -> bytes:
    """Deterministic CSV rendering: fixed column order, fixed float format."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    for r in rows:
        writer.writerow([_fmt(r.get(f)) for f in CSV_FIELDS])
    return buf.getvalue().encode("utf-8")


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return v


def emit_plots(rows: list[dict], out_dir) -> list[Path]:
    """One panel per (metric, role): metric vs test SNR, a line per train SNR."""
    if not rows:
        raise ValueError("results table is empty")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_list = ["psnr_db", "ssim", "mse", "lpips"]
    roles = sorted({r["role"] for r in rows})
    files = []
    for metric in metrics_list:
        for role in roles:
            sel = [r for r in rows if r["role"] == role]
            train_snrs = sorted({r["snr_train_db"] for r in sel})
            fig, ax = plt.subplots(figsize=(5, 4))
            for snr_train in train_snrs:
                pts: dict = {}
                for r in sel:
                    if r["snr_train_db"] == snr_train:
                        pts.setdefault(r["snr_test_db"], []).append(r[metric])
                xs = sorted(pts)
                ys = [float(np.mean(pts[x])) for x in xs]
                ax.plot(xs, ys, marker="o", label=f"train {snr_train} dB")
            ax.set_xlabel("test SNR (dB)")
            ax.set_ylabel(metric)
            ax.set_title(f"{metric} ({role})")
            ax.legend(fontsize=7)
            fig.tight_layout()
            path = out_dir / f"{metric}_{role}.png"
            fig.savefig(path, dpi=110)
            plt.close(fig)
            files.append(path)
    return files


def dump_images(record: dict, out_dir, prefix: str):
    """Persist a record's images as raw arrays plus PNGs for inspection."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, img in record.get("images", {}).items():
        arr_path = out_dir / f"{prefix}_{name}.arr"
        save_array(arr_path, img.data)
        png_path = out_dir / f"{prefix}_{name}.png"
        rgb = (np.transpose(img.data, (1, 2, 0)) * 255).round().astype(np.uint8)
        Image.fromarray(rgb).save(png_path)
        paths[name] = str(arr_path)
    return paths
