import numpy as np
import pytest
from PIL import Image

from soundssl.dataset import AudioClip
from soundssl.dsp import (MelConfig, SpectrogramConfig, StftConfig, filter_centers_hz, filter_edges_hz,
                          fit_columns, hann_window, hz_to_mel, istft, mel_filterbank,
                          mel_spectrogram_image, save_png, spectrogram, stft, stft_power)

SR = 44100


def sine(freq, n, sr=SR, amp=0.5, phase=0.0):
    return amp * np.sin(2 * np.pi * freq * np.arange(n) / sr + phase)


def hann_dtft(delta, n):
    """DFT of the periodic Hann window evaluated at a fractional bin offset (geometric sums)."""
    def rect(d):
        d = np.asarray(d, dtype=np.float64)
        out = np.empty(d.shape, dtype=np.complex128)
        near = np.isclose(np.mod(d, n), 0.0, atol=1e-12) | np.isclose(np.mod(d, n), n, atol=1e-12)
        z = np.exp(-2j * np.pi * d[~near] / n)
        out[~near] = (1 - z ** n) / (1 - z)
        out[near] = n
        return out
    return 0.5 * rect(delta) - 0.25 * rect(delta - 1) - 0.25 * rect(delta + 1)


class TestStft:
    def test_zero_clip(self):
        assert np.all(stft_power(np.zeros(8192)) == 0)

    def test_frame_count(self):
        assert stft_power(np.zeros(132300)).shape == (1025, 1 + 132300 // 512)

    def test_uncentered_short_clip(self):
        with pytest.raises(ValueError, match="shorter than one window"):
            stft_power(np.zeros(1000), StftConfig(center=False))

    def test_overlap(self):
        cfg = StftConfig.from_overlap(2048, 0.75)
        assert cfg.hop_length == 512 and cfg.overlap == 0.75

    def test_matches_direct_dft(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(4096)
        cfg = StftConfig(256, 64, center=False)
        spec = stft(x, cfg)
        n = np.arange(256)
        w = 0.5 - 0.5 * np.cos(2 * np.pi * n / 256)
        for frame in (0, 7, spec.shape[1] - 1):
            seg = x[frame * 64:frame * 64 + 256] * w
            for k in (0, 3, 50, 128):
                direct = np.sum(seg * np.exp(-2j * np.pi * k * n / 256))
                np.testing.assert_allclose(spec[k, frame], direct, rtol=1e-9, atol=1e-9)

    def test_bin_center_sine_dominates(self):
        k0 = 93
        x = sine(k0 * SR / 2048, 44100)
        p = stft_power(x, StftConfig(center=False))
        for col in p.T:
            assert np.argmax(col) == k0
            far = np.r_[col[:k0 - 2], col[k0 + 3:]]
            assert col[k0] >= 100 * far.max()

    def test_parseval_window_energy(self):
        # one-sided power of a full frame equals N * sum((A sin * w)^2) ~ N * A^2 / 2 * 3N / 8
        n, amp = 2048, 0.5
        x = sine(1000.0, 44100, amp=amp)
        p = stft_power(x, StftConfig(center=False))
        one_sided = p[0] + 2 * p[1:-1].sum(axis=0) + p[-1]
        predicted = n * amp ** 2 / 2 * 3 * n / 8
        np.testing.assert_allclose(one_sided, predicted, rtol=0.01)

    def test_istft_round_trip(self):
        x = np.random.default_rng(1).standard_normal(20000)
        cfg = StftConfig(1024, 256, pad_mode="constant")
        np.testing.assert_allclose(istft(stft(x, cfg), cfg, len(x)), x, atol=1e-9)

    def test_hann_periodic(self):
        w = hann_window(8)
        np.testing.assert_allclose(w, [0, 0.1464466, 0.5, 0.8535534, 1, 0.8535534, 0.5, 0.1464466], atol=1e-7)


class TestMelFilterbank:
    def test_htk_formula(self):
        assert abs(float(hz_to_mel(1000.0)) - 999.99) < 0.01

    def test_support_and_monotonic_centers(self):
        fb = mel_filterbank(MelConfig(), 2048, SR)
        assert fb.shape == (256, 1025)
        assert np.all(fb >= 0) and np.all(fb.sum(axis=1) > 0)
        assert np.all(np.diff(filter_centers_hz(MelConfig(), SR)) > 0)
        assert np.all(np.isfinite(fb.sum(axis=0)))

    def test_weights_match_numerical_integration(self):
        cfg = MelConfig(n_mels=10)
        n_fft, sr = 64, 8000
        fb = mel_filterbank(cfg, n_fft, sr)
        edges = filter_edges_hz(cfg, sr)
        width = sr / n_fft
        for m in (0, 4, 9):
            lo, mid, hi = edges[m:m + 3]
            for k in range(n_fft // 2 + 1):
                f = np.linspace(k * width - width / 2, k * width + width / 2, 20001)
                tri = np.clip(np.minimum((f - lo) / (mid - lo), (hi - f) / (hi - mid)), 0, None)
                expected = np.trapezoid(tri, f) / width
                assert abs(fb[m, k] - expected) < 1e-6

    @pytest.mark.parametrize("cfg", [MelConfig(n_mels=1), MelConfig(f_min=5000, f_max=4000),
                                     MelConfig(f_max=30000)])
    def test_invalid(self, cfg):
        with pytest.raises(ValueError):
            mel_filterbank(cfg, 2048, SR)


class TestImage:
    def test_shape_and_range(self):
        x = np.random.default_rng(2).standard_normal(132300) * 0.1
        img = mel_spectrogram_image(AudioClip(x, SR))
        assert img.shape == (256, 256) and img.dtype == np.float32
        assert img.min() >= 0 and img.max() <= 1 and np.all(np.isfinite(img))
        np.testing.assert_array_equal(img * 255, np.round(img * 255))

    def test_silence_is_zero(self):
        assert np.all(mel_spectrogram_image(AudioClip(np.zeros(132300), SR)) == 0)

    def test_gain_invariance(self):
        x = np.random.default_rng(3).standard_normal(132300) * 0.05
        a = mel_spectrogram_image(AudioClip(x, SR))
        b = mel_spectrogram_image(AudioClip(x * 7.0, SR))
        assert np.max(np.abs(a - b)) * 255 <= 1 + 1e-4

    def test_deterministic(self):
        x = np.random.default_rng(4).standard_normal(132300) * 0.05
        cfg = SpectrogramConfig()
        assert spectrogram(AudioClip(x, SR), cfg).tobytes() == spectrogram(AudioClip(x, SR), cfg).tobytes()

    def test_one_khz_row(self):
        n = 2048
        img = mel_spectrogram_image(AudioClip(sine(1000.0, 132300), SR))
        rows = img.argmax(axis=0)
        assert np.all(rows == rows[0])
        # oracle: filterbank applied to the analytic spectrum of a Hann-windowed 1 kHz tone
        k0 = 1000.0 * n / SR
        k = np.arange(n // 2 + 1)
        spectrum = np.abs(0.25 * (hann_dtft(k - k0, n) - hann_dtft(k + k0, n))) ** 2
        expected = int(np.argmax(mel_filterbank(MelConfig(), n, SR) @ spectrum))
        assert rows[0] == expected
        nearest = int(np.argmin(np.abs(filter_centers_hz(MelConfig(), SR) - 1000.0)))
        assert abs(expected - nearest) <= 1

    def test_fit_columns(self):
        db = np.arange(12.0).reshape(2, 6)
        np.testing.assert_array_equal(fit_columns(db, 4), db[:, 1:5])
        padded = fit_columns(db, 9)
        assert padded.shape == (2, 9)
        np.testing.assert_array_equal(padded[:, 1:7], db)
        assert np.all(padded[:, [0, 7, 8]] == 0.0)

    def test_png_export(self, tmp_path):
        img = np.linspace(0, 1, 64 * 32, dtype=np.float32).reshape(64, 32)
        path = save_png(img, tmp_path / "x.png")
        back = np.asarray(Image.open(path))
        assert back.dtype == np.uint8
        np.testing.assert_array_equal(back[::-1], np.round(img * 255).astype(np.uint8))
