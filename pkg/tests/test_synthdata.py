import numpy as np
import pytest

from mergelab.errors import ConfigError, DataError
from mergelab.synthdata import (
    FewShotAnchors,
    export_dataset_csv,
    gen_task,
    import_dataset_csv,
    sample_few_shot,
)


def default_task(seed=101, classes=4, per_class=100):
    return gen_task(
        task_id=0,
        num_classes=classes,
        samples_per_class=per_class,
        input_dim=16,
        spread=1.5,
        seed=seed,
    )


class TestGenTask:
    def test_same_seed_bit_identical(self):
        a, b = default_task(7), default_task(7)
        np.testing.assert_array_equal(a.features, b.features)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.train_idx, b.train_idx)

    def test_different_seed_differs(self):
        a, b = default_task(7), default_task(8)
        assert not np.array_equal(a.features, b.features)

    def test_stratified_split_counts(self):
        # C=4, 100/class: 70/10/20 per class -> test split of 80, 20 per class
        ds = default_task(classes=4, per_class=100)
        assert ds.test_idx.size == 80
        for cls in range(4):
            assert ds.class_indices("test", cls).size == 20
            assert ds.class_indices("train", cls).size == 70
            assert ds.class_indices("val", cls).size == 10

    def test_stratification_within_one_of_target(self):
        for per_class in (10, 37, 113, 300):
            ds = default_task(classes=3, per_class=per_class)
            for split, frac in (("train", 0.7), ("val", 0.1), ("test", 0.2)):
                for cls in range(3):
                    got = ds.class_indices(split, cls).size
                    assert abs(got - frac * per_class) <= 1 or got == 2  # min-2 floor

    def test_splits_disjoint_exhaustive(self):
        ds = default_task()
        allidx = np.concatenate([ds.train_idx, ds.val_idx, ds.test_idx])
        assert sorted(allidx.tolist()) == list(range(ds.features.shape[0]))

    def test_every_class_at_least_twice_per_split(self):
        ds = default_task(per_class=10)
        for split in ("train", "val", "test"):
            for cls in range(4):
                assert ds.class_indices(split, cls).size >= 2

    def test_zero_spread_collapses_to_means(self):
        ds = gen_task(0, 3, 30, 8, 0.0, seed=5)
        for cls in range(3):
            rows = ds.features[ds.labels == cls]
            assert np.ptp(rows, axis=0).max() == 0.0
        # nearest-mean classifier is perfect on separated point-classes
        means = np.stack([ds.features[ds.labels == c][0] for c in range(3)])
        test_x, test_y = ds.features_of("test"), ds.labels_of("test")
        pred = np.argmin(
            np.linalg.norm(test_x[:, None, :] - means[None], axis=2), axis=1
        )
        assert (pred == test_y).all()

    def test_invalid_counts_rejected(self):
        with pytest.raises(ConfigError):
            gen_task(0, 1, 100, 16, 1.5, seed=0)
        with pytest.raises(ConfigError):
            gen_task(0, 3, 9, 16, 1.5, seed=0)

    def test_heterogeneous_class_counts(self):
        tasks = [gen_task(t, c, 50, 16, 1.5, seed=t) for t, c in enumerate((3, 4, 5))]
        assert [t.num_classes for t in tasks] == [3, 4, 5]


class TestFewShot:
    def test_k_equals_class_support(self):
        ds = default_task(per_class=20)
        k = ds.class_indices("val", 0).size
        anchors = sample_few_shot(ds, k, "val", seed=3)
        got = np.sort(anchors.indices[0])
        np.testing.assert_array_equal(got, np.sort(ds.class_indices("val", 0)))

    def test_deterministic_under_seed(self):
        ds = default_task()
        a = sample_few_shot(ds, 1, "train", seed=44)
        b = sample_few_shot(ds, 1, "train", seed=44)
        for cls in range(ds.num_classes):
            np.testing.assert_array_equal(a.indices[cls], b.indices[cls])

    def test_seeds_give_different_anchors(self):
        # C=4, k=5, 100/class: identical 20-anchor draws across two seeds are
        # overwhelmingly unlikely
        ds = default_task(classes=4, per_class=100)
        a = sample_few_shot(ds, 5, "train", seed=1)
        b = sample_few_shot(ds, 5, "train", seed=2)
        same = all(
            np.array_equal(np.sort(a.indices[c]), np.sort(b.indices[c])) for c in range(4)
        )
        assert not same

    def test_exactly_k_per_class_without_replacement(self):
        ds = default_task()
        anchors = sample_few_shot(ds, 5, "train", seed=9)
        for cls in range(ds.num_classes):
            assert anchors.features[cls].shape == (5, ds.input_dim)
            assert len(set(anchors.indices[cls].tolist())) == 5
            assert (ds.labels[anchors.indices[cls]] == cls).all()

    def test_insufficient_samples_names_class(self):
        ds = default_task(per_class=10)  # val has 2 per class
        with pytest.raises(ConfigError, match="class 0"):
            sample_few_shot(ds, 3, "val", seed=0)

    def test_anchors_drawn_from_requested_split(self):
        ds = default_task()
        anchors = sample_few_shot(ds, 4, "test", seed=12)
        test_set = set(ds.test_idx.tolist())
        for cls in range(ds.num_classes):
            assert set(anchors.indices[cls].tolist()) <= test_set


class TestCsv:
    def test_round_trip_with_split_file(self, tmp_path):
        ds = default_task()
        data_p, split_p = tmp_path / "d.csv", tmp_path / "s.csv"
        export_dataset_csv(ds, data_p, split_p)
        back = import_dataset_csv(data_p, task_id=0, seed=0, split_path=split_p)
        np.testing.assert_array_equal(back.features, ds.features)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(np.sort(back.test_idx), np.sort(ds.test_idx))

    def test_import_without_split_is_stratified(self, tmp_path):
        ds = default_task(classes=3, per_class=100)
        data_p = tmp_path / "d.csv"
        export_dataset_csv(ds, data_p)
        back = import_dataset_csv(data_p, task_id=1, seed=5)
        for cls in range(3):
            assert back.class_indices("test", cls).size == 20

    def test_bad_header_rejected(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("x,y\n1,2\n")
        with pytest.raises(DataError):
            import_dataset_csv(p, task_id=0, seed=0)

    def test_bad_field_count(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("label,f0,f1\n0,1.0\n")
        with pytest.raises(DataError):
            import_dataset_csv(p, task_id=0, seed=0)
