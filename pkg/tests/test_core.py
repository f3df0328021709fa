"""Seeded randomness, image validation, array serialization, run config."""

import json

import numpy as np
import pytest

from stegodiff.core import (CorruptArrayError, ImageTensor, RunConfig,
                            SeededRng, clamp_pixels, gaussian_sample,
                            load_array, load_state, save_array, save_state,
                            stable_stream_id, validate_image)


class TestSeededRng:
    def test_same_identity_replays_sequence(self):
        a = SeededRng(7, 42).standard_normal(100)
        b = SeededRng(7, 42).standard_normal(100)
        np.testing.assert_array_equal(a, b)

    def test_distinct_streams_differ(self):
        a = SeededRng(7, 1).standard_normal(100)
        b = SeededRng(7, 2).standard_normal(100)
        assert not np.allclose(a, b)

    def test_child_streams_are_stable_and_separated(self):
        root = SeededRng(3)
        c1 = root.child("stage", 0)
        c2 = root.child("stage", 1)
        again = SeededRng(3).child("stage", 0)
        assert c1.stream_id == again.stream_id
        assert c1.stream_id != c2.stream_id
        np.testing.assert_array_equal(c1.standard_normal(16),
                                      again.standard_normal(16))

    def test_stable_stream_id_deterministic(self):
        assert stable_stream_id("a", 1) == stable_stream_id("a", 1)
        assert stable_stream_id("a", 1) != stable_stream_id("a", 2)
        assert 0 <= stable_stream_id("x") < 2**64

    def test_permutation_and_choice(self):
        rng = SeededRng(11)
        perm = rng.permutation(10)
        assert sorted(perm) == list(range(10))
        seq = ["p", "q", "r"]
        assert SeededRng(5).choice(seq) in seq

    def test_torch_seed_in_range(self):
        s = SeededRng(0).torch_seed()
        assert 0 <= s < 2**63


class TestGaussianSample:
    def test_monte_carlo_moments(self):
        x = gaussian_sample(SeededRng(123, 9), (1_000_000,))
        assert abs(x.mean()) < 0.01
        assert abs(x.std() - 1.0) < 0.02

    def test_shape_validation(self):
        rng = SeededRng(0)
        with pytest.raises(ValueError):
            gaussian_sample(rng, ())
        with pytest.raises(ValueError):
            gaussian_sample(rng, (0, 4))
        with pytest.raises(ValueError):
            gaussian_sample(rng, (-1,))

    def test_determinism(self):
        a = gaussian_sample(SeededRng(1, 2), (3, 4))
        b = gaussian_sample(SeededRng(1, 2), (3, 4))
        np.testing.assert_array_equal(a, b)


class TestImages:
    def test_valid_image_accepted(self):
        img = ImageTensor(np.zeros((3, 32, 32)), label="tree")
        assert img.shape == (3, 32, 32)
        assert img.label == "tree"

    @pytest.mark.parametrize("bad", [
        np.zeros((32, 32)),          # missing channel axis
        np.zeros((2, 32, 32)),       # unsupported channel count
        np.zeros((3, 4, 4)),         # too small
        np.full((3, 32, 32), 1.5),   # out of range
        np.full((3, 32, 32), np.nan),
    ])
    def test_invalid_images_rejected(self, bad):
        with pytest.raises(ValueError):
            validate_image(bad)

    def test_clamp_is_idempotent_and_identity_on_valid(self):
        x = np.random.default_rng(0).uniform(0, 1, (3, 16, 16))
        np.testing.assert_array_equal(clamp_pixels(x), x)
        y = np.array([-0.5, 0.5, 1.5])
        np.testing.assert_array_equal(clamp_pixels(y), [0.0, 0.5, 1.0])
        np.testing.assert_array_equal(clamp_pixels(clamp_pixels(y)),
                                      clamp_pixels(y))


class TestArrayFormat:
    @pytest.mark.parametrize("arr", [
        np.arange(12, dtype=np.float64).reshape(3, 4),
        np.zeros((0,), dtype=np.float32),
        np.arange(8, dtype=np.int64).reshape(2, 2, 2),
    ])
    def test_round_trip(self, tmp_path, arr):
        p = tmp_path / "x.arr"
        save_array(p, arr)
        out = load_array(p)
        assert out.dtype == arr.dtype
        assert out.shape == arr.shape
        np.testing.assert_array_equal(out, arr)

    def test_scalar_arrays_promote_to_vectors(self, tmp_path):
        p = tmp_path / "x.arr"
        save_array(p, np.array(3.5))
        out = load_array(p)
        assert out.shape == (1,)
        assert out[0] == 3.5

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.arr"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(CorruptArrayError):
            load_array(p)

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "x.arr"
        save_array(p, np.arange(100, dtype=np.float64))
        raw = p.read_bytes()
        p.write_bytes(raw[:-8])
        with pytest.raises(CorruptArrayError):
            load_array(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_array(tmp_path / "absent.arr")

    def test_state_round_trip(self, tmp_path):
        arrays = {"w": np.ones((2, 3)), "b": np.zeros(5, dtype=np.float32)}
        save_state(tmp_path / "state", arrays)
        out = load_state(tmp_path / "state")
        assert set(out) == {"w", "b"}
        for k in arrays:
            np.testing.assert_array_equal(out[k], arrays[k])


class TestRunConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = RunConfig(ddim_steps=25, guidance_scale=1.5, seed=9)
        p = tmp_path / "cfg.json"
        cfg.save(p)
        loaded = RunConfig.load(p)
        assert loaded == cfg
        assert json.loads(cfg.to_json())["ddim_steps"] == 25

    def test_validation(self):
        with pytest.raises(ValueError):
            RunConfig(ddim_steps=0)
        with pytest.raises(ValueError):
            RunConfig(guidance_scale=-1.0)
        with pytest.raises(ValueError):
            RunConfig(snr_db_list=[0.0, float("inf")])
