import numpy as np
import pytest

from lagattn.numerics import l2_normalize_cols
from lagattn.synthdata import (
    DatasetParseError,
    DatasetSpec,
    DatasetSpecError,
    SeriesSample,
    apply_mask,
    gen_lagged_series,
    inject_anomalies,
    read_dataset,
    split_dataset,
    to_training_sample,
    write_dataset,
)
from lagattn.xcorr import score_lags, xcorr_all_lags_naive


class TestGeneration:
    def test_deterministic(self):
        spec = DatasetSpec(t=32, d=4, n_samples=3, seed=9,
                           planted_lags=[(0, 1, 5, 0.8)], noise=0.1)
        a = gen_lagged_series(spec)
        b = gen_lagged_series(spec)
        assert all(x == y for x, y in zip(a, b))

    def test_planted_lag_measurable(self):
        # unit coupling, no noise: cross-correlation of (src, dst) peaks at L
        spec = DatasetSpec(t=96, d=4, n_samples=4, seed=10,
                           planted_lags=[(0, 2, 7, 1.0)], noise=0.0)
        for s in gen_lagged_series(spec):
            f = l2_normalize_cols(s.values)
            stack = xcorr_all_lags_naive(f, f)
            corr = np.abs(stack[:, 0, 2])  # key col 0 against query col 2
            assert int(np.argmax(corr[1:])) + 1 == 7

    def test_zero_coupling_no_planted_peak(self):
        # with w = 0 the nominal lag is not preferentially the argmax
        hits = 0
        for seed in range(20):
            spec = DatasetSpec(t=96, d=4, n_samples=1, seed=seed,
                               planted_lags=[(0, 2, 7, 0.0)], noise=0.0)
            s = gen_lagged_series(spec)[0]
            f = l2_normalize_cols(s.values)
            corr = np.abs(xcorr_all_lags_naive(f, f)[:, 0, 2])
            hits += int(np.argmax(corr[1:]) + 1 == 7)
        assert hits <= 5

    def test_bad_lag_rejected(self):
        with pytest.raises(DatasetSpecError):
            gen_lagged_series(DatasetSpec(t=16, d=2, planted_lags=[(0, 1, 16, 1.0)]))

    def test_classification_labels(self):
        spec = DatasetSpec(task="classification", t=32, d=3, n_samples=20,
                           seed=11, planted_lags=[(0, 1, 4, 1.0)], n_classes=3)
        labels = {s.label for s in gen_lagged_series(spec)}
        assert labels <= {0, 1, 2} and len(labels) > 1


class TestMasking:
    def test_exact_half(self):
        spec = DatasetSpec(t=96, d=8, n_samples=1, seed=12)
        s = apply_mask(gen_lagged_series(spec)[0], 0.5, seed=0)
        assert (s.mask == 0).sum() == 384

    def test_protocol_ratio(self):
        spec = DatasetSpec(t=96, d=8, n_samples=1, seed=13)
        s = apply_mask(gen_lagged_series(spec)[0], 0.125, seed=0)
        assert (s.mask == 0).sum() == 96

    def test_seeds_differ_counts_match(self):
        spec = DatasetSpec(t=48, d=4, n_samples=1, seed=14)
        base = gen_lagged_series(spec)[0]
        a = apply_mask(base, 0.25, seed=1)
        b = apply_mask(base, 0.25, seed=2)
        assert (a.mask == 0).sum() == (b.mask == 0).sum()
        assert not np.array_equal(a.mask, b.mask)

    def test_observed_values_untouched(self):
        spec = DatasetSpec(t=24, d=3, n_samples=1, seed=15)
        base = gen_lagged_series(spec)[0]
        masked = apply_mask(base, 0.3, seed=3)
        assert np.array_equal(masked.values, base.values)

    def test_bad_ratio(self):
        spec = DatasetSpec(t=8, d=2, n_samples=1, seed=16)
        with pytest.raises(Exception):
            apply_mask(gen_lagged_series(spec)[0], 1.0, seed=0)


class TestAnomalies:
    def _sample(self, seed=17):
        return gen_lagged_series(DatasetSpec(t=64, d=4, n_samples=1, seed=seed))[0]

    def test_count_zero_unchanged(self):
        s = self._sample()
        out = inject_anomalies(s, 0, 10.0, seed=0)
        assert np.array_equal(out.values, s.values)
        assert out.anomaly_flags.sum() == 0

    def test_spikes_are_top_deviations(self):
        s = self._sample(18)
        out = inject_anomalies(s, 5, 20.0, seed=1)
        dev = np.abs(out.values - s.values).max(axis=1)
        top5 = set(np.argsort(dev)[-5:])
        assert top5 == set(np.flatnonzero(out.anomaly_flags))

    def test_deterministic(self):
        s = self._sample(19)
        assert inject_anomalies(s, 3, 5.0, seed=7) == inject_anomalies(s, 3, 5.0, seed=7)

    def test_count_too_large(self):
        with pytest.raises(Exception):
            inject_anomalies(self._sample(), 64, 5.0, seed=0)


class TestSplit:
    def test_ratios(self):
        samples = gen_lagged_series(DatasetSpec(t=8, d=2, n_samples=20, seed=20))
        tr, va, te = split_dataset(samples)
        assert (len(tr), len(va), len(te)) == (12, 4, 4)


class TestFileFormat:
    def _dataset(self, task="imputation"):
        spec = DatasetSpec(task=task, t=16, d=3, n_samples=4, seed=21,
                           planted_lags=[(0, 1, 3, 0.9)], noise=0.2)
        samples = gen_lagged_series(spec)
        if task == "imputation":
            samples = [apply_mask(s, 0.25, seed=i) for i, s in enumerate(samples)]
        if task == "anomaly":
            samples = [inject_anomalies(s, 2, 8.0, seed=i)
                       for i, s in enumerate(samples)]
        return samples

    @pytest.mark.parametrize("task", ["imputation", "anomaly", "classification"])
    def test_roundtrip(self, tmp_path, task):
        samples = self._dataset(task)
        path = tmp_path / "data.train"
        write_dataset(path, samples, task=task)
        loaded, loaded_task = read_dataset(path)
        assert loaded_task == task
        assert all(a == b for a, b in zip(samples, loaded))
        assert len(loaded) == len(samples)

    def test_empty_dataset(self, tmp_path):
        path = tmp_path / "empty.train"
        write_dataset(path, [], task="imputation")
        loaded, task = read_dataset(path)
        assert loaded == [] and task == "imputation"

    def test_corrupt_tag(self, tmp_path):
        path = tmp_path / "bad.train"
        path.write_text("garbage\n")
        with pytest.raises(DatasetParseError, match="format tag"):
            read_dataset(path)

    def test_corrupt_header_names_position(self, tmp_path):
        path = tmp_path / "bad.train"
        path.write_text("lagattn-dataset v1\nT x d 3 task imputation samples 1\n")
        with pytest.raises(DatasetParseError, match=":2:"):
            read_dataset(path)

    def test_truncated_sample(self, tmp_path):
        samples = self._dataset()
        path = tmp_path / "trunc.train"
        write_dataset(path, samples, task="imputation")
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-5]) + "\n")
        with pytest.raises(DatasetParseError):
            read_dataset(path)


class TestTrainingSamples:
    def test_imputation_input_zeroed(self):
        s = apply_mask(gen_lagged_series(DatasetSpec(t=8, d=2, n_samples=1,
                                                     seed=22))[0], 0.5, seed=0)
        x_in, target, mask, label = to_training_sample(s, "imputation")
        assert np.array_equal(x_in[mask == 0], np.zeros((mask == 0).sum()))
        assert np.array_equal(x_in[mask == 1], target[mask == 1])
