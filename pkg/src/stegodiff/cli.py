"""Command-line entry points for training and running the pipeline."""

from __future__ import annotations

import json
from fractions import Fraction
from pathlib import Path

import click
import numpy as np

from . import data, pipeline
from .core import RunConfig, SeededRng
from .diffusion import (DiffusionTrainConfig, GuidanceConfig, NoisePredictorParams,
                        embed_key, make_schedule, train_noise_predictor)
from .keygen import KeyPrompt, TemplateCaptioner
from .pipeline import ModelBundle, evaluate_test_set, rows_to_csv_bytes
from .semcom import ChannelConfig, JsccParams, JsccTrainConfig, train_jscc
from .vae import VaeParams, VaeTrainConfig, train_vae, vae_encode, reparameterize


def _load_run_config(config_path) -> RunConfig:
    if config_path:
        return RunConfig.load(config_path)
    return RunConfig()


def _dataset(cfg: RunConfig, rng: SeededRng, n: int):
    return data.make_dataset(n, cfg.image_size, rng.child("dataset"))


@click.group()
def main():
    """Coverless diffusion steganography over a simulated noisy channel."""


common = [
    click.option("--config", "config_path", type=click.Path(exists=True), default=None,
                 help="JSON run config"),
    click.option("--seed", type=int, default=0),
    click.option("--out-dir", type=click.Path(), default="out"),
]


def with_common(f):
    for opt in reversed(common):
        f = opt(f)
    return f


@main.command("train-vae")
@with_common
@click.option("--n-images", type=int, default=500)
@click.option("--epochs", type=int, default=30)
def cli_train_vae(config_path, seed, out_dir, n_images, epochs):
    cfg = _load_run_config(config_path)
    rng = SeededRng(seed if seed else cfg.seed)
    dataset = _dataset(cfg, rng, n_images)
    params = train_vae(dataset, VaeTrainConfig(epochs=epochs,
                                               latent_channels=cfg.latent_channels),
                       rng.child("train-vae"))
    dest = Path(out_dir) / "models" / "vae"
    params.save(dest)
    click.echo(f"vae saved to {dest} "
               f"(val recon mse {params.manifest['final_val_recon_mse']:.5f})")


@main.command("train-diffusion")
@with_common
@click.option("--n-images", type=int, default=1000)
@click.option("--epochs", type=int, default=120)
def cli_train_diffusion(config_path, seed, out_dir, n_images, epochs):
    cfg = _load_run_config(config_path)
    rng = SeededRng(seed if seed else cfg.seed)
    vae = VaeParams.load(Path(out_dir) / "models" / "vae")
    dataset = _dataset(cfg, rng, n_images)
    captioner = TemplateCaptioner()
    latents, keys = [], []
    for i, img in enumerate(dataset):
        dist = vae_encode(img, vae)
        eps = rng.child("latent-eps", i).standard_normal(dist.mu.shape)
        latents.append(reparameterize(dist, eps))
        keys.append(KeyPrompt.from_text(captioner.caption(img)))
    schedule = make_schedule(1000)
    params = train_noise_predictor(np.stack(latents), keys, schedule,
                                   DiffusionTrainConfig(epochs=epochs),
                                   rng.child("train-diffusion"))
    dest = Path(out_dir) / "models" / "diffusion"
    params.save(dest)
    click.echo(f"noise predictor saved to {dest} "
               f"(val eps mse {params.manifest['val_history'][-1]['eps_mse']:.4f})")


@main.command("train-jscc")
@with_common
@click.option("--n-images", type=int, default=500)
@click.option("--epochs", type=int, default=30)
@click.option("--snr-train", type=float, default=10.0)
@click.option("--ratio", type=str, default="1/12")
@click.option("--variant", type=click.Choice(["a", "b"]), default="a")
def cli_train_jscc(config_path, seed, out_dir, n_images, epochs, snr_train, ratio, variant):
    cfg = _load_run_config(config_path)
    rng = SeededRng(seed if seed else cfg.seed)
    dataset = _dataset(cfg, rng, n_images)
    params = train_jscc(dataset, snr_train, Fraction(ratio),
                        JsccTrainConfig(epochs=epochs, variant=variant),
                        rng.child("train-jscc", variant, snr_train))
    dest = Path(out_dir) / "models" / f"jscc_{variant}_snr{snr_train:g}"
    params.save(dest)
    click.echo(f"jscc codec saved to {dest}")


def _load_bundle(out_dir, cfg: RunConfig, variant="a", snr_train=10.0) -> ModelBundle:
    models_dir = Path(out_dir) / "models"
    return ModelBundle(
        vae=VaeParams.load(models_dir / "vae"),
        predictor=NoisePredictorParams.load(models_dir / "diffusion"),
        schedule=make_schedule(1000),
        jscc=JsccParams.load(models_dir / f"jscc_{variant}_snr{snr_train:g}"),
    )


@main.command("run")
@with_common
@click.option("--snr-db", type=float, default=10.0)
@click.option("--channel-seed", type=int, default=None)
@click.option("--label", type=click.Choice(data.CLASSES), default="eiffel_tower")
@click.option("--variant", default="a")
@click.option("--snr-train", type=float, default=10.0)
def cli_run(config_path, seed, out_dir, snr_db, channel_seed, label, variant, snr_train):
    """Hide, transmit, and recover one secret image; dump the stages."""
    cfg = _load_run_config(config_path)
    rng = SeededRng(seed if seed else cfg.seed)
    models = _load_bundle(out_dir, cfg, variant, snr_train)
    x_s = data.make_image(label, cfg.image_size, rng.child("secret"))
    keys = pipeline.make_key_pair(x_s, "cli-session")
    channel = ChannelConfig(snr_db=snr_db)
    run_rng = rng if channel_seed is None else SeededRng(channel_seed)
    gcfg = GuidanceConfig(beta=cfg.guidance_scale, ddim_steps=cfg.ddim_steps)
    record = pipeline.run_pipeline(x_s, keys, models, channel, gcfg, run_rng)
    dump_dir = Path(out_dir) / "run"
    record["images"]["secret"] = x_s
    pipeline.dump_images(record, dump_dir, f"{label}_snr{snr_db:g}")
    summary = {k: v for k, v in record.items() if k != "images"}
    click.echo(json.dumps(summary, indent=2, sort_keys=True))


@main.command("sweep")
@with_common
@click.option("--snr-train-list", type=str, default="10")
@click.option("--snr-test-list", type=str, default="0,2,4,6,8,10")
@click.option("--n-images", type=int, default=20)
@click.option("--variant", default="a")
def cli_sweep(config_path, seed, out_dir, snr_train_list, snr_test_list, n_images, variant):
    """Grid evaluation over (train SNR, test SNR, role); writes results.csv."""
    cfg = _load_run_config(config_path)
    rng = SeededRng(seed if seed else cfg.seed)
    models_dir = Path(out_dir) / "models"
    vae = VaeParams.load(models_dir / "vae")
    predictor = NoisePredictorParams.load(models_dir / "diffusion")
    schedule = make_schedule(1000)
    jscc_by_snr = {}
    for s in (float(v) for v in snr_train_list.split(",")):
        path = models_dir / f"jscc_{variant}_snr{s:g}"
        jscc_by_snr[s] = JsccParams.load(path) if path.exists() else None
    images = data.make_dataset(n_images, cfg.image_size, rng.child("test-set"))
    gcfg = GuidanceConfig(beta=cfg.guidance_scale, ddim_steps=cfg.ddim_steps)
    result = pipeline.sweep_snr(
        images, vae, predictor, schedule, jscc_by_snr,
        [float(v) for v in snr_test_list.split(",")],
        gcfg, rng.child("sweep"), out_dir=Path(out_dir) / "sweep",
    )
    click.echo(f"{len(result['rows'])} rows -> {Path(out_dir) / 'sweep' / 'results.csv'}"
               + (f" ({len(result['skipped'])} grid points skipped)" if result["skipped"] else ""))


@main.command("eval-threats")
@with_common
@click.option("--snr-db", type=float, default=8.0)
@click.option("--n-images", type=int, default=20)
@click.option("--variant", default="a")
@click.option("--snr-train", type=float, default=10.0)
def cli_eval_threats(config_path, seed, out_dir, snr_db, n_images, variant, snr_train):
    """Compare the legitimate receiver against all three eavesdroppers."""
    cfg = _load_run_config(config_path)
    rng = SeededRng(seed if seed else cfg.seed)
    models = _load_bundle(out_dir, cfg, variant, snr_train)
    images = data.make_dataset(n_images, cfg.image_size, rng.child("test-set"))
    gcfg = GuidanceConfig(beta=cfg.guidance_scale, ddim_steps=cfg.ddim_steps)
    rows = evaluate_test_set(images, models, snr_db, gcfg, rng.child("threats"))
    for role in pipeline.ROLES:
        sel = [r for r in rows if r["role"] == role]
        click.echo(f"{role:>10}: psnr {np.mean([r['psnr_db'] for r in sel]):6.2f} dB  "
                   f"ssim {np.mean([r['ssim'] for r in sel]):.4f}  "
                   f"lpips {np.mean([r['lpips'] for r in sel]):.4f}")


@main.command("plots")
@with_common
def cli_plots(config_path, seed, out_dir):
    """Render metric-vs-SNR panels from an existing sweep results.csv."""
    sweep_dir = Path(out_dir) / "sweep"
    csv_path = sweep_dir / "results.csv"
    if not csv_path.exists():
        raise click.ClickException(f"no results at {csv_path}; run `sweep` first")
    import csv as _csv

    with open(csv_path) as f:
        rows = []
        for r in _csv.DictReader(f):
            rows.append({
                "image_id": int(r["image_id"]), "role": r["role"],
                "snr_train_db": float(r["snr_train_db"]),
                "snr_test_db": float(r["snr_test_db"]),
                "psnr_db": float(r["psnr_db"]), "ssim": float(r["ssim"]),
                "mse": float(r["mse"]), "lpips": float(r["lpips"]),
            })
    files = pipeline.emit_plots(rows, sweep_dir / "plots")
    click.echo(f"{len(files)} plots -> {sweep_dir / 'plots'}")


if __name__ == "__main__":
    main()
