"""Dataset construction, binary/CSV round trips, splits, synthetic generator."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcembed.dataset import (
    ClassSplit,
    FeatureDataset,
    SynthSpec,
    generate_synthetic,
    load_dataset,
    mode_of_label,
    save_dataset,
    split_by_class,
)
from dcembed.errors import DataError


def make_ds(n=10, m=4, n_classes=3, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureDataset.from_arrays(
        rng.normal(size=(n, m)), rng.integers(0, n_classes, size=n)
    )


class TestFeatureDataset:
    def test_arrays_read_only(self):
        ds = make_ds()
        with pytest.raises(ValueError):
            ds.features[0, 0] = 1.0
        with pytest.raises(ValueError):
            ds.labels[0] = 1

    def test_class_indices_partition_samples(self):
        ds = make_ds(n=50, n_classes=5)
        seen = np.concatenate(list(ds.class_indices.values()))
        assert sorted(seen) == list(range(50))
        for c, idx in ds.class_indices.items():
            assert (ds.labels[idx] == c).all()

    def test_rejects_nan(self):
        feats = np.zeros((3, 2))
        feats[1, 0] = np.nan
        with pytest.raises(DataError, match="row 1"):
            FeatureDataset.from_arrays(feats, [0, 0, 1])

    def test_rejects_length_mismatch(self):
        with pytest.raises(DataError):
            FeatureDataset.from_arrays(np.zeros((3, 2)), [0, 1])

    def test_rejects_negative_labels(self):
        with pytest.raises(DataError):
            FeatureDataset.from_arrays(np.zeros((2, 2)), [0, -1])

    def test_subset_preserves_rows(self):
        ds = make_ds(n=20)
        sub = ds.subset(np.array([3, 7, 11]))
        assert sub.n == 3
        np.testing.assert_array_equal(sub.features, ds.features[[3, 7, 11]])
        np.testing.assert_array_equal(sub.labels, ds.labels[[3, 7, 11]])


class TestBinaryFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        ds = FeatureDataset.from_arrays(
            rng.normal(size=(17, 5)), np.arange(17) % 3
        )
        path = tmp_path / "ds.bin"
        save_dataset(ds, path)
        back = load_dataset(path)
        np.testing.assert_array_equal(back.features, ds.features)
        # labels are dense here so the on-load remap is the identity
        np.testing.assert_array_equal(back.labels, ds.labels)

    def test_load_remaps_sparse_labels_densely(self, tmp_path):
        rng = np.random.default_rng(0)
        ds = FeatureDataset.from_arrays(
            rng.normal(size=(6, 2)), np.array([7, 7, 2, 40, 2, 7])
        )
        path = tmp_path / "ds.bin"
        save_dataset(ds, path)
        back = load_dataset(path)
        np.testing.assert_array_equal(back.labels, [1, 1, 0, 2, 0, 1])
        assert back.sample_ids[3] == "3:40"

    def test_header_layout(self, tmp_path):
        ds = make_ds(n=3, m=2)
        path = tmp_path / "ds.bin"
        save_dataset(ds, path)
        raw = path.read_bytes()
        assert raw[:4] == b"DCE1"
        assert int.from_bytes(raw[4:8], "little") == 1
        assert int.from_bytes(raw[8:16], "little") == 3
        assert int.from_bytes(raw[16:20], "little") == 2
        assert len(raw) == 20 + 3 * 2 * 8 + 3 * 4

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(DataError, match="magic"):
            load_dataset(path)

    def test_truncated_file_rejected(self, tmp_path):
        ds = make_ds(n=5, m=3)
        path = tmp_path / "ds.bin"
        save_dataset(ds, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(DataError, match="n=5"):
            load_dataset(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_dataset(tmp_path / "absent.bin")

    @settings(max_examples=25, deadline=None)
    @given(
        n=st.integers(min_value=1, max_value=40),
        m=st.integers(min_value=1, max_value=8),
        seed=st.integers(min_value=0, max_value=2**16),
    )
    def test_round_trip_any_shape(self, n, m, seed, tmp_path_factory):
        rng = np.random.default_rng(seed)
        ds = FeatureDataset.from_arrays(
            rng.normal(size=(n, m)) * 100, rng.integers(0, max(1, n // 2), size=n)
        )
        path = tmp_path_factory.mktemp("rt") / "ds.bin"
        save_dataset(ds, path)
        back = load_dataset(path)
        np.testing.assert_array_equal(back.features, ds.features)


class TestCsvImport:
    def test_reads_rows_and_labels(self, tmp_path):
        path = tmp_path / "ds.csv"
        path.write_text("1.0,2.0,7\n3.0,4.0,7\n5.0,6.0,9\n")
        ds = load_dataset(path, format="csv")
        assert ds.n == 3 and ds.m == 2
        # labels remapped dense, originals kept in the ids
        np.testing.assert_array_equal(ds.labels, [0, 0, 1])
        assert list(ds.sample_ids) == ["0:7", "1:7", "2:9"]

    def test_header_skipped_when_declared(self, tmp_path):
        path = tmp_path / "ds.csv"
        path.write_text("f0,f1,label\n1.0,2.0,0\n")
        ds = load_dataset(path, format="csv", has_header=True)
        assert ds.n == 1

    def test_ragged_row_reports_index(self, tmp_path):
        path = tmp_path / "ds.csv"
        path.write_text("1.0,2.0,0\n1.0,0\n")
        with pytest.raises(DataError, match="row 1"):
            load_dataset(path, format="csv")

    def test_bad_label_reports_index(self, tmp_path):
        path = tmp_path / "ds.csv"
        path.write_text("1.0,2.0,0\n3.0,4.0,cat\n")
        with pytest.raises(DataError, match="row 1.*cat"):
            load_dataset(path, format="csv")

    def test_non_numeric_feature_reports_index(self, tmp_path):
        path = tmp_path / "ds.csv"
        path.write_text("1.0,x,0\n")
        with pytest.raises(DataError, match="row 0"):
            load_dataset(path, format="csv")


class TestSplitByClass:
    def test_fraction_takes_ceil_of_sorted_classes(self):
        ds = make_ds(n=60, n_classes=5, seed=1)
        train, test, split = split_by_class(ds, 0.5)
        # ceil(0.5 * 5) = 3 classes to train
        assert split.train_classes == frozenset({0, 1, 2})
        assert split.test_classes == frozenset({3, 4})
        assert set(np.unique(train.labels)) <= split.train_classes
        assert set(np.unique(test.labels)) <= split.test_classes
        assert train.n + test.n == ds.n

    def test_explicit_class_list(self):
        ds = make_ds(n=40, n_classes=4, seed=2)
        train, test, split = split_by_class(ds, [1, 3])
        assert split.train_classes == frozenset({1, 3})
        assert set(np.unique(train.labels)) == {1, 3}

    def test_disjointness_enforced(self):
        with pytest.raises(DataError):
            ClassSplit(frozenset({1}), frozenset({1, 2}))

    def test_unknown_class_rejected(self):
        ds = make_ds(n_classes=3)
        with pytest.raises(DataError, match="unknown"):
            split_by_class(ds, [0, 99])

    def test_empty_side_rejected(self):
        ds = make_ds(n=30, n_classes=3, seed=3)
        with pytest.raises(DataError):
            split_by_class(ds, [0, 1, 2])


class TestSynthetic:
    def test_shape_and_labels(self):
        spec = SynthSpec(num_modes=3, classes_per_mode=4, samples_per_class=5,
                         feature_dim=6, seed=7)
        ds = generate_synthetic(spec)
        assert ds.features.shape == (3 * 4 * 5, 6)
        assert set(np.unique(ds.labels)) == set(range(12))
        counts = np.bincount(ds.labels)
        assert (counts == 5).all()

    def test_deterministic_per_seed(self):
        spec = SynthSpec(num_modes=2, classes_per_mode=2, samples_per_class=3, seed=11)
        a = generate_synthetic(spec)
        b = generate_synthetic(spec)
        np.testing.assert_array_equal(a.features, b.features)
        c = generate_synthetic(SynthSpec(num_modes=2, classes_per_mode=2,
                                         samples_per_class=3, seed=12))
        assert not np.array_equal(a.features, c.features)

    def test_mode_centroids_separated(self):
        # With zero class spread and zero noise, samples sit exactly on the
        # mode centers, so pairwise centroid distances must clear the floor.
        spec = SynthSpec(num_modes=4, classes_per_mode=2, samples_per_class=3,
                         feature_dim=8, mode_separation=5.0, class_spread=0.0,
                         noise_sigma=0.0, seed=1)
        ds = generate_synthetic(spec)
        modes = mode_of_label(spec, ds.labels)
        cents = np.stack([ds.features[modes == k].mean(axis=0) for k in range(4)])
        d = np.linalg.norm(cents[:, None] - cents[None, :], axis=-1)
        d[np.diag_indices_from(d)] = np.inf
        assert d.min() >= 5.0

    def test_noisy_mode_centroids_still_separated(self):
        spec = SynthSpec(seed=3)  # defaults: separation 14, spread 1, sigma 0.5
        ds = generate_synthetic(spec)
        modes = mode_of_label(spec, ds.labels)
        cents = np.stack([ds.features[modes == k].mean(axis=0)
                          for k in range(spec.num_modes)])
        d = np.linalg.norm(cents[:, None] - cents[None, :], axis=-1)
        d[np.diag_indices_from(d)] = np.inf
        # mode centers are >= 14 apart; centroid jitter from spread/noise is
        # far below that, so half the floor is a safe bound
        assert d.min() >= spec.mode_separation / 2

    def test_invalid_spec_rejected(self):
        with pytest.raises(DataError, match="mode_separation"):
            generate_synthetic(SynthSpec(mode_separation=1.0, class_spread=2.0))
        with pytest.raises(DataError, match="class_spread"):
            generate_synthetic(SynthSpec(class_spread=0.1, noise_sigma=0.5))
        with pytest.raises(DataError, match="num_modes"):
            generate_synthetic(SynthSpec(num_modes=0))

    def test_mode_of_label(self):
        spec = SynthSpec(num_modes=3, classes_per_mode=4)
        np.testing.assert_array_equal(
            mode_of_label(spec, np.array([0, 3, 4, 11])), [0, 0, 1, 2]
        )
