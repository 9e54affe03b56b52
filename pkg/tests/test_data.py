"""Tests for preprocessing, the synthetic generator and fold construction."""

import math
import warnings

import numpy as np
import pytest

from harpeft.data import (
    ClassSignal,
    DataError,
    DatasetBundle,
    DomainShift,
    ProtocolError,
    SensorRecording,
    SyntheticSpec,
    Window,
    build_label_union,
    default_synthetic_spec,
    generate_synthetic,
    load_domain_csv,
    lodo_folds,
    resample_to_50hz,
    save_domain_csv,
    segment_windows,
    split_train_eval,
    znormalize,
    load_window_cache,
    save_window_cache,
)


def rec(samples, rate=50.0, label="walking", domain="dom_a"):
    return SensorRecording(samples=samples, sample_rate=rate, label=label,
                           domain_id=domain)


class TestResample:
    def test_100hz_halves_sample_count(self):
        r = rec(np.random.default_rng(0).normal(size=(200, 6)), rate=100.0)
        out = resample_to_50hz(r)
        assert out.sample_rate == 50.0
        assert out.n_samples == 100

    def test_50hz_is_bit_identical(self):
        r = rec(np.random.default_rng(1).normal(size=(100, 6)))
        out = resample_to_50hz(r)
        assert out is r

    def test_upsampling_refused(self):
        with pytest.raises(DataError):
            resample_to_50hz(rec(np.zeros((10, 6)), rate=25.0))

    def test_sinusoid_keeps_dominant_frequency(self):
        # discrete-Fourier oracle: 5 Hz tone at 200 Hz stays 5 Hz at 50 Hz
        t = np.arange(800) / 200.0
        tone = np.sin(2 * math.pi * 5.0 * t)
        r = rec(np.tile(tone[:, None], (1, 6)), rate=200.0)
        out = resample_to_50hz(r)
        spectrum = np.abs(np.fft.rfft(out.samples[:, 0]))
        spectrum[0] = 0.0
        freqs = np.fft.rfftfreq(out.n_samples, d=1.0 / 50.0)
        bin_width = freqs[1] - freqs[0]
        assert abs(freqs[spectrum.argmax()] - 5.0) <= bin_width

    def test_non_integer_ratio_uses_interpolation(self):
        # a 5 Hz tone sampled at 130 Hz still lands near 5 Hz after resampling
        t = np.arange(650) / 130.0
        tone = np.sin(2 * math.pi * 5.0 * t)
        out = resample_to_50hz(rec(np.tile(tone[:, None], (1, 6)), rate=130.0))
        assert out.sample_rate == 50.0
        spectrum = np.abs(np.fft.rfft(out.samples[:, 0]))
        spectrum[0] = 0.0
        freqs = np.fft.rfftfreq(out.n_samples, d=1.0 / 50.0)
        assert abs(freqs[spectrum.argmax()] - 5.0) <= 2 * (freqs[1] - freqs[0])


class TestZNormalize:
    def test_channel_statistics(self):
        r = rec(np.array([[1.0], [2.0], [3.0]]))
        out = znormalize([r])[0]
        assert abs(out.samples.mean()) < 1e-9
        assert abs(out.samples.std() - 1.0) < 1e-9

    def test_constant_channel_maps_to_zero(self):
        r = rec(np.full((10, 2), 7.0))
        out = znormalize([r])[0]
        np.testing.assert_array_equal(out.samples, 0.0)

    def test_domains_normalized_independently(self):
        rng = np.random.default_rng(2)
        a = [rec(rng.normal(5.0, 2.0, size=(300, 3)), domain="a")]
        b = [rec(rng.normal(-1.0, 0.5, size=(300, 3)), domain="b")]
        norm_a = znormalize(a)[0].samples
        norm_b = znormalize(b)[0].samples
        for arr in (norm_a, norm_b):
            assert np.abs(arr.mean(axis=0)).max() < 1e-9
            assert np.abs(arr.std(axis=0) - 1.0).max() < 1e-9

    def test_statistics_span_whole_domain(self):
        # two recordings in one domain share the same normalization constants
        r1 = rec(np.full((50, 1), 10.0))
        r2 = rec(np.full((50, 1), -10.0))
        out = znormalize([r1, r2])
        np.testing.assert_allclose(out[0].samples, 1.0)
        np.testing.assert_allclose(out[1].samples, -1.0)


class TestSegmentWindows:
    def test_three_windows_from_256(self):
        r = rec(np.arange(256 * 2, dtype=float).reshape(256, 2))
        windows = segment_windows(r)
        assert len(windows) == 3
        np.testing.assert_array_equal(windows[0].values, r.samples[0:128])
        np.testing.assert_array_equal(windows[1].values, r.samples[64:192])
        np.testing.assert_array_equal(windows[2].values, r.samples[128:256])

    def test_exact_length_gives_one(self):
        assert len(segment_windows(rec(np.zeros((128, 6))))) == 1

    def test_short_recording_gives_none(self):
        assert segment_windows(rec(np.zeros((127, 6)))) == []

    def test_window_count_formula(self):
        for n in (128, 129, 191, 192, 500, 1280):
            windows = segment_windows(rec(np.zeros((n, 3))))
            assert len(windows) == (n - 128) // 64 + 1

    def test_labels_inherited(self):
        windows = segment_windows(rec(np.zeros((128, 6)), label="cycling"))
        assert windows[0].label == "cycling"


class TestLabelUnion:
    def _bundle(self, names, domain):
        windows = [Window(values=np.zeros((128, 6)), label=n, domain_id=domain)
                   for n in names]
        return DatasetBundle(windows=windows,
                             label_vocabulary={n: i for i, n in enumerate(sorted(set(names)))})

    def test_lexicographic_union(self):
        a = self._bundle(["walk", "sit"], "a")
        b = self._bundle(["walk", "run"], "b")
        union = build_label_union([a, b])
        assert union.label_vocabulary == {"run": 0, "sit": 1, "walk": 2}

    def test_single_domain_identity(self):
        a = self._bundle(["sit", "walk"], "a")
        union = build_label_union([a])
        assert union.label_vocabulary == a.label_vocabulary

    def test_missing_class_contributes_no_windows(self):
        a = self._bundle(["walk"], "a")
        b = self._bundle(["run"], "b")
        union = build_label_union([a, b])
        labels = union.labels()
        assert set(labels.tolist()) == {0, 1}
        assert union.n_classes == 2


class TestSyntheticGenerator:
    def test_deterministic_under_seed(self):
        spec = default_synthetic_spec(n_domains=2, n_classes=3,
                                      samples_per_class=512, seed=9)
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        for ba, bb in zip(a, b):
            for wa, wb in zip(ba.windows, bb.windows):
                np.testing.assert_array_equal(wa.values, wb.values)

    def test_null_shift_domains_identical(self):
        classes = (ClassSignal(name="walking", base_freq_hz=2.0,
                               channel_offsets=(0.5,) * 6),
                   ClassSignal(name="sitting", base_freq_hz=4.0,
                               channel_offsets=(-0.5,) * 6))
        domains = (DomainShift(name="a", noise_sigma=0.0),
                   DomainShift(name="b", noise_sigma=0.0))
        spec = SyntheticSpec(classes=classes, domains=domains,
                             samples_per_class=512, seed=4)
        a, b = generate_synthetic(spec)
        for wa, wb in zip(a.windows, b.windows):
            np.testing.assert_array_equal(wa.values, wb.values)

    def test_degenerate_specs_rejected(self):
        with pytest.raises(DataError):
            SyntheticSpec(classes=(), domains=(DomainShift(name="a"),))
        dup = (ClassSignal(name="x", base_freq_hz=2.0),
               ClassSignal(name="x", base_freq_hz=3.0))
        with pytest.raises(DataError):
            SyntheticSpec(classes=dup, domains=(DomainShift(name="a"),))

    def test_linear_probe_separates_two_classes(self):
        # least-squares oracle: raw windows of 2 classes are linearly separable
        spec = default_synthetic_spec(n_domains=1, n_classes=2,
                                      samples_per_class=2048, seed=5)
        bundle = generate_synthetic(spec)[0]
        X = np.stack([w.values.ravel() for w in bundle.windows])
        y = np.where(bundle.labels() == 1, 1.0, -1.0)
        design = np.column_stack([X, np.ones(len(X))])
        coef, *_ = np.linalg.lstsq(design, y, rcond=None)
        accuracy = ((design @ coef > 0) == (y > 0)).mean()
        assert accuracy >= 0.90


class TestLodoFolds:
    def _bundles(self, n):
        spec = default_synthetic_spec(n_domains=n, n_classes=2,
                                      samples_per_class=256, seed=6)
        return generate_synthetic(spec)

    def test_five_domains_five_folds(self):
        assert len(lodo_folds(self._bundles(5))) == 5

    def test_two_domains_swap(self):
        folds = lodo_folds(self._bundles(2))
        assert len(folds) == 2
        assert folds[0][1].domains() == folds[1][0].domains()
        assert folds[1][1].domains() == folds[0][0].domains()

    def test_targets_partition_domains(self):
        for n in (2, 3, 5):
            folds = lodo_folds(self._bundles(n))
            targets = [t.domains()[0] for _, t in folds]
            assert len(set(targets)) == n
            for pre, target in folds:
                assert target.domains()[0] not in pre.domains()
                assert len(pre.domains()) == n - 1

    def test_fewer_than_two_rejected(self):
        with pytest.raises(ProtocolError):
            lodo_folds(self._bundles(1))

    def test_folds_share_union_vocabulary(self):
        folds = lodo_folds(self._bundles(3))
        vocabularies = {tuple(sorted(f[0].label_vocabulary.items())) for f in folds}
        assert len(vocabularies) == 1


class TestSplitTrainEval:
    def _bundle(self, per_class=20, classes=("a", "b", "c", "d", "e")):
        windows = [Window(values=np.zeros((128, 6)), label=c, domain_id="d")
                   for c in classes for _ in range(per_class)]
        return DatasetBundle(windows=windows,
                             label_vocabulary={c: i for i, c in enumerate(classes)})

    def test_seventy_thirty(self):
        train, evl = split_train_eval(self._bundle(), 0.7, seed=0)
        assert (len(train.windows), len(evl.windows)) == (70, 30)

    def test_thirty_seventy(self):
        train, evl = split_train_eval(self._bundle(), 0.3, seed=0)
        assert (len(train.windows), len(evl.windows)) == (30, 70)

    def test_disjoint_and_exhaustive(self):
        bundle = self._bundle(per_class=11)
        train, evl = split_train_eval(bundle, 0.6, seed=3)
        assert len(train.windows) + len(evl.windows) == len(bundle.windows)
        train_ids = {id(w) for w in train.windows}
        assert not train_ids & {id(w) for w in evl.windows}

    def test_stratified(self):
        train, _ = split_train_eval(self._bundle(per_class=10), 0.7, seed=1)
        counts = np.bincount(train.labels(), minlength=5)
        np.testing.assert_array_equal(counts, 7)

    def test_single_window_class_goes_to_train(self):
        windows = [Window(values=np.zeros((128, 6)), label="a", domain_id="d")]
        windows += [Window(values=np.zeros((128, 6)), label="b", domain_id="d")
                    for _ in range(10)]
        bundle = DatasetBundle(windows=windows, label_vocabulary={"a": 0, "b": 1})
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            train, evl = split_train_eval(bundle, 0.5, seed=0)
        assert any("one window" in str(w.message) for w in caught)
        assert {w.label for w in evl.windows} == {"b"}

    def test_deterministic(self):
        bundle = self._bundle()
        first = split_train_eval(bundle, 0.7, seed=5)[0].labels()
        second = split_train_eval(bundle, 0.7, seed=5)[0].labels()
        np.testing.assert_array_equal(first, second)

    def test_bad_fraction(self):
        with pytest.raises(DataError):
            split_train_eval(self._bundle(), 1.0, seed=0)


class TestFileFormats:
    def test_csv_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        recs = [rec(rng.normal(size=(130, 6)), label="walking"),
                rec(rng.normal(size=(140, 6)), label="sitting")]
        path = tmp_path / "dom.csv"
        save_domain_csv(recs, path)
        loaded = load_domain_csv(path, "dom_a", 50.0)
        assert [r.label for r in loaded] == ["walking", "sitting"]
        for orig, back in zip(recs, loaded):
            np.testing.assert_array_equal(back.samples, orig.samples)

    def test_csv_requires_header(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("1,2,3,4,5,6,walking\n")
        with pytest.raises(DataError):
            load_domain_csv(path, "dom", 50.0)

    def test_window_cache_roundtrip(self, tmp_path):
        spec = default_synthetic_spec(n_domains=2, n_classes=2,
                                      samples_per_class=384, seed=8)
        bundles = {f"d{i}": b for i, b in enumerate(generate_synthetic(spec))}
        path = tmp_path / "cache.bin"
        save_window_cache(bundles, path)
        loaded = load_window_cache(path)
        assert set(loaded) == set(bundles)
        for name, bundle in bundles.items():
            assert loaded[name].label_vocabulary == bundle.label_vocabulary
            for wa, wb in zip(bundle.windows, loaded[name].windows):
                np.testing.assert_array_equal(wb.values, wa.values)
                assert wb.label == wa.label
