import numpy as np
import pytest

from collision_lab.const import SPLIT_TEST1, SPLIT_TEST2, SPLIT_TRAIN
from collision_lab.datasets import (
    FeatureTable,
    Instance,
    generate_synthetic,
    load_dataset,
    save_dataset,
    split_dataset,
)
from collision_lab.exceptions import DataError, DatasetTooSmall, StratificationError


class TestGenerateSynthetic:
    def test_shape_labels_and_range(self):
        ds = generate_synthetic(30, 5, 64, 127.0, 1, 0.15)
        assert ds.inputs.shape == (150, 64)
        assert np.bincount(ds.labels).tolist() == [30] * 5
        assert np.all(np.abs(ds.inputs) <= 127.0)
        assert list(ds.ids) == list(range(150))
        assert not ds.is_poison.any()

    def test_same_seed_same_data(self):
        a = generate_synthetic(10, 5, 16, 1.0, 4, 0.2)
        b = generate_synthetic(10, 5, 16, 1.0, 4, 0.2)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        c = generate_synthetic(10, 5, 16, 1.0, 5, 0.2)
        assert not np.array_equal(a.inputs, c.inputs)

    def test_zero_noise_gives_class_templates(self):
        ds = generate_synthetic(10, 5, 16, 1.0, 4, 0.0)
        for label in range(5):
            rows = ds.inputs[ds.labels == label]
            assert np.all(rows == rows[0])

    def test_label_offset(self):
        ds = generate_synthetic(10, 5, 16, 1.0, 4, 0.1, label_offset=5)
        assert ds.label_set == {5, 6, 7, 8, 9}
        assert ds.labels.min() == 5

    def test_too_small(self):
        with pytest.raises(DatasetTooSmall):
            generate_synthetic(4, 10, 16, 1.0, 1, 0.1)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"n_classes": 1},
            {"input_dim": 4},
            {"noise_level": -0.1},
            {"scale": 0.0},
        ],
    )
    def test_invalid_arguments(self, kwargs):
        args = {"n_per_class": 50, "n_classes": 4, "input_dim": 16, "scale": 1.0, "noise_level": 0.1}
        args.update(kwargs)
        with pytest.raises(DataError):
            generate_synthetic(
                args["n_per_class"], args["n_classes"], args["input_dim"], args["scale"], 1, args["noise_level"]
            )


class TestSplit:
    def test_stratified_counts(self, small_dataset):
        for label in range(4):
            tags = [t for t, y in zip(small_dataset.split_tags, small_dataset.labels) if y == label]
            assert tags.count(SPLIT_TRAIN) == 16
            assert tags.count(SPLIT_TEST1) == 2
            assert tags.count(SPLIT_TEST2) == 2

    def test_partition_is_disjoint_and_complete(self, small_dataset):
        parts = [set(small_dataset.ids[small_dataset.tagged(t)]) for t in (SPLIT_TRAIN, SPLIT_TEST1, SPLIT_TEST2)]
        assert sum(len(p) for p in parts) == len(small_dataset)
        assert set.union(*parts) == set(small_dataset.ids)

    def test_tagged_rows_are_in_id_order(self, small_dataset):
        ids = small_dataset.ids[small_dataset.tagged(SPLIT_TRAIN)]
        assert list(ids) == sorted(ids)

    def test_split_is_seeded(self):
        ds = generate_synthetic(20, 4, 16, 1.0, 1, 0.1)
        assert split_dataset(ds, 3).split_tags == split_dataset(ds, 3).split_tags
        assert split_dataset(ds, 3).split_tags != split_dataset(ds, 4).split_tags

    def test_class_too_small(self):
        with pytest.raises(StratificationError):
            split_dataset(generate_synthetic(9, 6, 16, 1.0, 1, 0.1), 0)

    def test_resplit_refused(self, small_dataset):
        with pytest.raises(StratificationError):
            split_dataset(small_dataset, 0)


def test_instance_base_id_must_match_poison_flag():
    with pytest.raises(DataError):
        Instance(x=np.zeros(3), scale=1.0, label=0, id=1, is_poison=True)
    with pytest.raises(DataError):
        Instance(x=np.zeros(3), scale=1.0, label=0, id=1, base_id=4)


def test_with_instances_appends_to_train(small_dataset):
    base = small_dataset.instance(int(small_dataset.ids[small_dataset.tagged(SPLIT_TEST1)[0]]))
    poison = Instance(x=base.x * 0.5, scale=base.scale, label=base.label, id=small_dataset.next_id, is_poison=True,
                      base_id=base.id)
    grown = small_dataset.with_instances([poison])
    assert len(grown) == len(small_dataset) + 1
    assert grown.instance(poison.id).base_id == base.id
    assert grown.position(poison.id) in set(grown.tagged(SPLIT_TRAIN))
    assert len(small_dataset) == 80


def test_unknown_id(small_dataset):
    with pytest.raises(DataError):
        small_dataset.instance(10_000)


def test_save_and_load(tmp_path, small_dataset):
    save_dataset(small_dataset, tmp_path / "ds")
    loaded = load_dataset(tmp_path / "ds")
    np.testing.assert_array_equal(loaded.inputs, small_dataset.inputs)
    np.testing.assert_array_equal(loaded.labels, small_dataset.labels)
    np.testing.assert_array_equal(loaded.base_ids, small_dataset.base_ids)
    assert loaded.split_tags == small_dataset.split_tags
    assert loaded.n_classes == 4


class TestFeatureTable:
    def test_lookup_follows_requested_order(self):
        table = FeatureTable(ids=np.array([5, 2, 9]), features=np.arange(6, dtype=float).reshape(3, 2))
        np.testing.assert_array_equal(table.lookup([9, 5]), [[4.0, 5.0], [0.0, 1.0]])

    def test_missing_id(self):
        table = FeatureTable(ids=np.array([1]), features=np.zeros((1, 2)))
        with pytest.raises(DataError):
            table.lookup([2])

    def test_save_and_load(self, tmp_path, rng):
        table = FeatureTable(ids=np.array([3, 1]), features=rng.normal(size=(2, 4)))
        table.save(tmp_path / "f.atf", tmp_path / "i.atf")
        loaded = FeatureTable.load(tmp_path / "f.atf", tmp_path / "i.atf")
        np.testing.assert_array_equal(loaded.features, table.features)
        np.testing.assert_array_equal(loaded.ids, table.ids)
