import collections

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import wavfile

from soundssl.dataset import (ClassRecipe, DataError, SplitPlan, kfold, load_clip, load_manifest,
                              stratified_split, stratified_subsample, stratified_test_counts,
                              synth_corpus, write_manifest, write_wav)
from soundssl.dsp import MelConfig, SpectrogramConfig, StftConfig, filter_centers_hz, spectrogram

import _table1


def _tone(freq, sr, seconds, channels=1):
    t = np.arange(int(round(sr * seconds))) / sr
    x = 0.5 * np.sin(2 * np.pi * freq * t)
    return np.stack([x] * channels, axis=1) if channels > 1 else x


@pytest.fixture
def small_corpus(tmp_path):
    for i in range(3):
        write_wav(tmp_path / f"c{i}.wav", _tone(440, 8000, 1.0), 8000)
    return tmp_path


class TestManifest:
    def test_full_size_manifest(self, tmp_path):
        names = list(_table1.TOTALS)
        for c in names:
            write_wav(tmp_path / f"{c}.wav", np.zeros(300), 100)
        rows = [(f"{c}.wav", c, 3.0) for c in _table1.labels()]
        m = load_manifest(write_manifest(tmp_path / "m.csv", rows), classes=names)
        assert len(m) == 5000
        assert m.class_counts() == _table1.TOTALS
        assert m.duration_mismatches == []

    def test_empty(self, tmp_path):
        (tmp_path / "m.csv").write_text("")
        with pytest.raises(DataError, match="empty manifest"):
            load_manifest(tmp_path / "m.csv")
        (tmp_path / "h.csv").write_text("path,label,duration_s\n")
        with pytest.raises(DataError, match="empty manifest"):
            load_manifest(tmp_path / "h.csv")

    def test_unknown_label_names_row(self, small_corpus):
        rows = [("c0.wav", "a", 1.0), ("c1.wav", "unknown_sp", 1.0)]
        path = write_manifest(small_corpus / "m.csv", rows)
        with pytest.raises(DataError, match=r"m\.csv:3: unknown label 'unknown_sp'"):
            load_manifest(path, classes=["a"], clip_length_s=1.0)

    def test_malformed_row(self, small_corpus):
        (small_corpus / "m.csv").write_text("path,label,duration_s\nc0.wav,a\n")
        with pytest.raises(DataError, match="malformed"):
            load_manifest(small_corpus / "m.csv")
        (small_corpus / "n.csv").write_text("path,label,duration_s\nc0.wav,a,long\n")
        with pytest.raises(DataError, match="malformed duration"):
            load_manifest(small_corpus / "n.csv")

    def test_missing_file_and_wav(self, small_corpus):
        with pytest.raises(DataError, match="not found"):
            load_manifest(small_corpus / "nope.csv")
        path = write_manifest(small_corpus / "m.csv", [("missing.wav", "a", 1.0)])
        with pytest.raises(DataError, match="missing WAV"):
            load_manifest(path, clip_length_s=1.0)

    def test_unreadable_wav(self, small_corpus):
        (small_corpus / "bad.wav").write_bytes(b"not a wav at all")
        path = write_manifest(small_corpus / "m.csv", [("bad.wav", "a", 1.0)])
        with pytest.raises(DataError, match="RIFF"):
            load_manifest(path, clip_length_s=1.0)

    def test_duration_mismatch_reported(self, small_corpus):
        path = write_manifest(small_corpus / "m.csv", [("c0.wav", "a", 1.0), ("c1.wav", "a", 2.5)])
        m = load_manifest(path, clip_length_s=1.0)
        assert m.duration_mismatches == [(1, 2.5)]


class TestLoadClip:
    def test_stereo_48k_to_mono_44k1(self, tmp_path):
        wavfile.write(tmp_path / "s.wav", 48000, _tone(440, 48000, 3.0, channels=2).astype(np.float32))
        clip = load_clip(tmp_path / "s.wav", 44100, 3.0)
        assert clip.samples.shape == (132300,) and clip.sample_rate == 44100

    def test_short_file_zero_padded(self, tmp_path):
        write_wav(tmp_path / "s.wav", _tone(440, 8000, 2.5), 8000)
        clip = load_clip(tmp_path / "s.wav", 8000, 3.0)
        assert len(clip) == 24000
        assert np.all(clip.samples[20000:] == 0) and np.any(clip.samples[:20000] != 0)

    def test_long_file_center_truncated(self, tmp_path):
        x = np.linspace(-0.5, 0.5, 10)
        write_wav(tmp_path / "s.wav", x, 4)
        clip = load_clip(tmp_path / "s.wav", 4, 1.0)
        np.testing.assert_allclose(clip.samples, x[3:7], atol=1 / 32767)

    def test_resampled_tone_peak(self, tmp_path):
        write_wav(tmp_path / "s.wav", _tone(440, 48000, 3.0), 48000)
        clip = load_clip(tmp_path / "s.wav", 44100, 3.0)
        n = len(clip)
        # direct DFT magnitude at every bin near the expected one; the peak must be within 1 bin
        bins = np.arange(0, n // 2)
        spectrum = np.abs(np.fft.rfft(clip.samples.astype(np.float64)))[:n // 2]
        expected = 440 * n / 44100
        assert abs(bins[np.argmax(spectrum)] - expected) <= 1

    def test_unsupported_codec(self, tmp_path):
        wavfile.write(tmp_path / "u8.wav", 8000, np.full(100, 128, dtype=np.uint8))
        with pytest.raises(DataError, match="unsupported codec"):
            load_clip(tmp_path / "u8.wav", 8000, 0.01)

    def test_corrupt_header(self, tmp_path):
        good = write_wav(tmp_path / "g.wav", np.zeros(100), 8000).read_bytes()
        (tmp_path / "c.wav").write_bytes(good[:30])
        with pytest.raises(DataError):
            load_clip(tmp_path / "c.wav", 8000, 0.01)


class TestStratifiedSplit:
    def test_reference_test_column(self):
        counts = stratified_test_counts(_table1.TOTALS, 0.1)
        assert counts == _table1.TEST
        plan = stratified_split(_table1.labels(), 0.1, seed=1030)
        assert len(plan.train_indices) == 4500 and len(plan.test_indices) == 500
        labels = _table1.labels()
        assert collections.Counter(labels[i] for i in plan.test_indices)["vire_chiv"] == 81

    def test_half_split_of_pairs(self):
        plan = stratified_split(["a", "a", "b", "b", "c", "c"], 0.5, seed=1)
        assert len(plan.train_indices) == len(plan.test_indices) == 3
        labels = ["a", "a", "b", "b", "c", "c"]
        assert sorted(labels[i] for i in plan.test_indices) == ["a", "b", "c"]

    def test_deterministic(self):
        a = stratified_split(_table1.labels(), 0.1, seed=1030)
        b = stratified_split(_table1.labels(), 0.1, seed=1030)
        assert a.test_indices == b.test_indices and a.train_indices == b.train_indices
        assert stratified_split(_table1.labels(), 0.1, seed=1).test_indices != a.test_indices

    def test_too_small_class(self):
        with pytest.raises(DataError, match="at least 2"):
            stratified_split(["a", "a", "b"], 0.5)
        with pytest.raises(DataError):
            stratified_split(["a", "a"], 1.5)

    @settings(max_examples=60, deadline=None)
    @given(st.dictionaries(st.sampled_from("abcdefgh"), st.integers(2, 400), min_size=1),
           st.sampled_from([0.1, 0.2, 0.25, 0.3, 0.5]))
    def test_per_class_fraction_bound(self, counts, fraction):
        try:
            sizes = stratified_test_counts(counts, fraction)
        except DataError:
            return
        for c, n in counts.items():
            assert abs(sizes[c] / n - fraction) <= 1 / n + 1e-12
        assert sum(sizes.values()) == int(np.floor(fraction * sum(counts.values()) + 0.5))


class TestKFold:
    def test_reference_folds(self):
        labels = _table1.labels()
        plan = kfold(stratified_split(labels, 0.1, 1030), labels, k=5, seed=1030)
        assert [len(f) for f in plan.folds] == [900] * 5
        assert set().union(*map(set, plan.folds)) == set(plan.train_indices)
        for i in range(5):
            for j in range(i + 1, 5):
                assert not set(plan.folds[i]) & set(plan.folds[j])
            assert len(plan.fold_training(i)) == 3600

    def test_toy_two_folds(self):
        labels = ["a"] * 4 + ["b"] * 4
        plan = kfold(SplitPlan(list(range(8)), []), labels, k=2, seed=3)
        for fold in plan.folds:
            assert collections.Counter(labels[i] for i in fold) == {"a": 2, "b": 2}

    def test_deterministic_and_serializable(self):
        labels = _table1.labels()
        a = kfold(stratified_split(labels), labels)
        b = kfold(stratified_split(labels), labels)
        assert a.folds == b.folds
        assert SplitPlan.from_json(a.to_json()) == a

    def test_k_too_large(self):
        labels = ["a"] * 3 + ["b"] * 6
        with pytest.raises(DataError, match="exceeds"):
            kfold(SplitPlan(list(range(9)), []), labels, k=4)
        with pytest.raises(DataError):
            kfold(SplitPlan(list(range(9)), []), labels, k=1)

    def test_subsample(self):
        labels = ["a"] * 10 + ["b"] * 5
        keep = stratified_subsample(range(15), labels, 0.2, seed=0)
        assert collections.Counter(labels[i] for i in keep) == {"a": 2, "b": 1}
        assert stratified_subsample(range(15), labels, 1.0, 0) == list(range(15))


class TestSynthCorpus:
    def test_count_and_determinism(self, tmp_path):
        recipes = [ClassRecipe(f"k{i}", kind, band) for i, (kind, band) in
                   enumerate([("tone", (500, 900)), ("chirp", (1500, 2500)), ("am", (3000, 3500))])]
        m1 = synth_corpus(recipes, 40, tmp_path / "a", seed=7, sample_rate=8000, clip_length_s=0.25)
        m2 = synth_corpus(recipes, 40, tmp_path / "b", seed=7, sample_rate=8000, clip_length_s=0.25)
        assert len(m1) == 120 and m1.class_counts() == {"k0": 40, "k1": 40, "k2": 40}
        for e1, e2 in zip(m1.entries, m2.entries):
            assert e1.path.read_bytes() == e2.path.read_bytes()

    def test_disjoint_bands_peak_in_band(self, tmp_path):
        sr = 16000
        bands = {"low": (1000.0, 2000.0), "high": (4000.0, 5000.0)}
        recipes = [ClassRecipe(n, "tone", b, noise_level=0.002) for n, b in bands.items()]
        m = synth_corpus(recipes, 6, tmp_path, seed=2, sample_rate=sr, clip_length_s=1.0)
        cfg = SpectrogramConfig(sr, StftConfig(1024, 256), MelConfig(64), 64)
        centers = filter_centers_hz(cfg.mel, sr)
        peaks = {}
        for name, band in bands.items():
            images = [spectrogram(load_clip(e.path, sr, 1.0), cfg) for e in m.entries if e.label == name]
            row = int(np.argmax(np.mean(images, axis=0).mean(axis=1)))
            lo, hi = (np.searchsorted(centers, band[0]) - 1, np.searchsorted(centers, band[1]))
            assert lo <= row <= hi, (name, centers[row])
            peaks[name] = row
        assert peaks["low"] < peaks["high"]

    def test_unwritable(self, tmp_path):
        (tmp_path / "file").write_text("x")
        with pytest.raises(DataError, match="cannot write"):
            synth_corpus([ClassRecipe("a", "tone", (500, 900))], 1, tmp_path / "file" / "sub")
