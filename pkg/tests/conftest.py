"""Shared fixtures: trained models are built once per session and cached
on disk under .artifacts so repeated test runs skip the training cost."""

from __future__ import annotations

from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from stegodiff.core import SeededRng
from stegodiff.data import make_dataset
from stegodiff.diffusion import (DiffusionTrainConfig, NoisePredictorParams,
                                 make_schedule, train_noise_predictor)
from stegodiff.keygen import KeyPrompt, TemplateCaptioner
from stegodiff.semcom import JsccParams, JsccTrainConfig, train_jscc
from stegodiff.vae import (VaeParams, VaeTrainConfig, train_vae, vae_encode,
                           reparameterize)

# Bump when the training recipe below changes, so stale caches are ignored.
RECIPE_VERSION = "v1"
ARTIFACTS = Path(__file__).resolve().parent.parent / ".artifacts" / RECIPE_VERSION

GLOBAL_SEED = 0
IMAGE_SIZE = 32
T_TRAIN = 1000

# Acceptance tests append "[criterion N] PASS/FAIL: ..." lines here; the
# summary hook below echoes them after the run so they survive capture.
acceptance_verdicts = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if acceptance_verdicts:
        terminalreporter.section("acceptance criteria")
        for line in acceptance_verdicts:
            terminalreporter.write_line(line)


def _cache_dir(name: str) -> Path:
    return ARTIFACTS / name


@pytest.fixture(scope="session")
def base_rng():
    return SeededRng(GLOBAL_SEED)


@pytest.fixture(scope="session")
def dataset(base_rng):
    return make_dataset(1000, IMAGE_SIZE, base_rng.child("dataset"))


@pytest.fixture(scope="session")
def schedule():
    return make_schedule(T_TRAIN)


@pytest.fixture(scope="session")
def trained_vae(dataset, base_rng):
    path = _cache_dir("vae")
    if path.exists():
        return VaeParams.load(path)
    params = train_vae(dataset[:500], VaeTrainConfig(epochs=30),
                       base_rng.child("train-vae"))
    params.save(path)
    return params


def _latents_and_keys(dataset, vae, rng):
    captioner = TemplateCaptioner()
    latents, keys = [], []
    for i, img in enumerate(dataset):
        dist = vae_encode(img, vae)
        eps = rng.child("latent-eps", i).standard_normal(dist.mu.shape)
        latents.append(reparameterize(dist, eps))
        keys.append(KeyPrompt.from_text(captioner.caption(img)))
    return np.stack(latents), keys


@pytest.fixture(scope="session")
def trained_predictor(dataset, trained_vae, schedule, base_rng):
    path = _cache_dir("diffusion")
    if path.exists():
        return NoisePredictorParams.load(path)
    latents, keys = _latents_and_keys(dataset, trained_vae, base_rng)
    params = train_noise_predictor(latents, keys, schedule,
                                   DiffusionTrainConfig(),
                                   base_rng.child("train-diffusion"))
    params.save(path)
    return params


def _trained_jscc(dataset, base_rng, variant: str) -> JsccParams:
    path = _cache_dir(f"jscc_{variant}")
    if path.exists():
        return JsccParams.load(path)
    params = train_jscc(dataset[:500], 10.0, Fraction(1, 12),
                        JsccTrainConfig(variant=variant),
                        base_rng.child("train-jscc", variant, 10.0))
    params.save(path)
    return params


@pytest.fixture(scope="session")
def jscc_a(dataset, base_rng):
    return _trained_jscc(dataset, base_rng, "a")


@pytest.fixture(scope="session")
def jscc_b(dataset, base_rng):
    return _trained_jscc(dataset, base_rng, "b")


@pytest.fixture(scope="session")
def test_images(base_rng):
    """Held-out evaluation set on a stream disjoint from training."""
    return make_dataset(50, IMAGE_SIZE, base_rng.child("test-set"))
