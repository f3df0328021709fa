"""Channel symbols, power normalization, AWGN calibration, codec shapes."""

from fractions import Fraction

import numpy as np
import pytest
import torch

from stegodiff.core import ImageTensor, SeededRng
from stegodiff.data import make_dataset
from stegodiff.semcom import (ChannelConfig, ConvJscc, JsccParams,
                              JsccTrainConfig, NOISELESS_SNR_DB, SymbolVector,
                              _power_normalize, awgn_channel, sem_decode,
                              sem_encode, symbol_count, train_jscc)


class TestSymbolCount:
    def test_reference_rate(self):
        # 3 * 32 * 32 pixels at ratio 1/12 is exactly 256 channel symbols
        assert symbol_count(Fraction(1, 12), 3, 32) == 256

    def test_other_exact_rates(self):
        assert symbol_count(Fraction(1, 6), 3, 32) == 512
        assert symbol_count(Fraction(1, 3), 1, 24) == 192

    def test_inexact_rate_rejected(self):
        with pytest.raises(ValueError):
            symbol_count(Fraction(1, 7), 3, 32)


class TestPowerNormalization:
    def test_unit_power(self):
        t = torch.randn(4, 256, dtype=torch.float64)
        s = _power_normalize(t)
        power = (s**2).mean(dim=1)
        assert torch.allclose(power, torch.ones(4, dtype=torch.float64),
                              atol=1e-6)

    def test_scale_invariance(self):
        t = torch.randn(2, 64, dtype=torch.float64)
        a = _power_normalize(t)
        b = _power_normalize(7.5 * t)
        assert torch.allclose(a, b, atol=1e-12)


class TestChannel:
    def test_noise_variance_values(self):
        assert ChannelConfig(snr_db=0.0).noise_variance == pytest.approx(1.0)
        assert ChannelConfig(snr_db=10.0).noise_variance == pytest.approx(0.1)
        assert ChannelConfig(snr_db=20.0).noise_variance == pytest.approx(0.01)

    def test_noiseless_cap(self):
        assert ChannelConfig(snr_db=NOISELESS_SNR_DB).noise_variance == 0.0
        assert ChannelConfig(snr_db=80.0).noise_variance == 0.0
        s = SymbolVector(np.arange(8.0))
        out = awgn_channel(s, ChannelConfig(snr_db=60.0), SeededRng(0))
        np.testing.assert_array_equal(out.symbols, s.symbols)

    def test_gain_applied(self):
        s = SymbolVector(np.ones(4))
        out = awgn_channel(s, ChannelConfig(snr_db=60.0, h=0.5), SeededRng(0))
        np.testing.assert_array_equal(out.symbols, 0.5 * np.ones(4))

    def test_nonfinite_input_rejected(self):
        s = SymbolVector(np.array([1.0, np.inf]))
        with pytest.raises(ValueError):
            awgn_channel(s, ChannelConfig(snr_db=10.0), SeededRng(0))

    @pytest.mark.parametrize("snr_db", [0.0, 10.0])
    def test_empirical_snr_calibration(self, snr_db):
        # unit-power input over 1e5 symbols: measured SNR within 0.1 dB
        n = 100_000
        rng_sig = SeededRng(5, 1)
        s = rng_sig.standard_normal(n)
        s = s * np.sqrt(n) / np.linalg.norm(s)
        sv = SymbolVector(s)
        assert sv.power == pytest.approx(1.0, abs=1e-12)
        out = awgn_channel(sv, ChannelConfig(snr_db=snr_db), SeededRng(5, 2))
        noise = out.symbols - s
        measured = 10.0 * np.log10(sv.power / np.mean(noise**2))
        assert measured == pytest.approx(snr_db, abs=0.1)

    def test_channel_determinism(self):
        s = SymbolVector(np.ones(64))
        a = awgn_channel(s, ChannelConfig(snr_db=5.0), SeededRng(9, 9))
        b = awgn_channel(s, ChannelConfig(snr_db=5.0), SeededRng(9, 9))
        np.testing.assert_array_equal(a.symbols, b.symbols)


class TestCodecShapes:
    @pytest.mark.parametrize("variant", ["a", "b"])
    def test_encode_decode_shapes(self, variant):
        model = ConvJscc(k=256, variant=variant)
        model.eval()
        x = torch.rand(2, 3, 32, 32)
        s = model.encode(x)
        assert s.shape == (2, 256)
        assert torch.allclose((s**2).mean(dim=1), torch.ones(2), atol=1e-5)
        out = model.decode(s)
        assert out.shape == (2, 3, 32, 32)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            ConvJscc(k=256, variant="c")

    def test_indivisible_symbol_grid(self):
        with pytest.raises(ValueError):
            ConvJscc(k=250, variant="a")


@pytest.fixture(scope="module")
def tiny_codec():
    rng = SeededRng(21)
    ds = make_dataset(12, 32, rng.child("ds"))
    return train_jscc(ds, 10.0, Fraction(1, 12),
                      JsccTrainConfig(epochs=1, width=8), rng.child("t"))


class TestEndToEnd:
    def test_sem_encode_decode(self, tiny_codec):
        img = make_dataset(1, 32, SeededRng(22))[0]
        s = sem_encode(img, tiny_codec)
        assert s.symbols.shape == (256,)
        assert s.power == pytest.approx(1.0, abs=1e-5)
        out = sem_decode(s, tiny_codec)
        assert out.shape == (3, 32, 32)

    def test_shape_contracts(self, tiny_codec):
        with pytest.raises(ValueError):
            sem_encode(ImageTensor(np.zeros((3, 16, 16))), tiny_codec)
        with pytest.raises(ValueError):
            sem_decode(SymbolVector(np.zeros(100)), tiny_codec)

    def test_save_load_round_trip(self, tiny_codec, tmp_path):
        tiny_codec.save(tmp_path / "jscc")
        loaded = JsccParams.load(tmp_path / "jscc")
        assert loaded.k == 256
        assert loaded.compression_ratio == Fraction(1, 12)
        assert loaded.snr_train == 10.0
        img = make_dataset(1, 32, SeededRng(23))[0]
        np.testing.assert_allclose(sem_encode(img, tiny_codec).symbols,
                                   sem_encode(img, loaded).symbols, atol=1e-6)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            train_jscc([], 10.0, Fraction(1, 12), JsccTrainConfig(epochs=1),
                       SeededRng(0))
