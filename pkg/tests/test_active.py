import csv

import numpy as np
import pytest

from collision_lab.active import (
    Oracle,
    al_loop,
    select_query,
    uncertainty,
    write_trace_csv,
)
from collision_lab.attack import PoisonConfig, craft_poison_set
from collision_lab.const import ACTIVATION_LINEAR, SPLIT_TEST2, SPLIT_TRAIN, TRACE_COLUMNS
from collision_lab.datasets import FeatureTable, Instance
from collision_lab.exceptions import (
    BudgetExceedsPool,
    ConfigError,
    DataError,
    EmptyPool,
    InsufficientData,
    ShapeMismatch,
    UntrainedHead,
)
from collision_lab.models import DenseHead, DenseLayer, HeadConfig, predict
from collision_lab.numerics import entropy, make_rng

from .conftest import random_extractor

HEAD = HeadConfig(max_epochs=15)


def _head(weight, bias, trained=True):
    return DenseHead(layers=[DenseLayer(np.asarray(weight, float), np.asarray(bias, float), ACTIVATION_LINEAR)],
                     trained=trained)


def _random_head(seed, feature_dim=8, n_classes=4):
    rng = make_rng(seed)
    return _head(rng.normal(size=(feature_dim, n_classes)), rng.normal(size=n_classes))


class TestUncertainty:
    def test_untrained_head(self, extractor):
        with pytest.raises(UntrainedHead):
            uncertainty(extractor, _head(np.zeros((8, 4)), np.zeros(4), trained=False), np.zeros(32))

    def test_uniform_output_is_log_m(self, extractor, rng):
        head = _head(np.zeros((8, 4)), np.zeros(4))
        assert uncertainty(extractor, head, rng.normal(size=32)) == pytest.approx(np.log(4), abs=1e-12)

    def test_saturated_output_is_zero(self, extractor, rng):
        head = _head(np.zeros((8, 4)), [1000.0, 0.0, 0.0, 0.0])
        assert uncertainty(extractor, head, rng.normal(size=32)) == 0.0

    def test_composition(self, extractor, rng):
        head = _random_head(3)
        for x in rng.uniform(-127.0, 127.0, size=(100, 32)):
            assert uncertainty(extractor, head, x) == entropy(predict(extractor, head, x).y_pred)


class TestSelectQuery:
    def test_single_element(self, extractor, small_dataset):
        only = small_dataset.instance_at(5)
        assert select_query(extractor, _random_head(1), [only]) == only.id

    def test_empty_pool(self, extractor):
        with pytest.raises(EmptyPool):
            select_query(extractor, _random_head(1), [])

    def test_uniform_instance_wins(self, extractor, small_dataset):
        head = _head(make_rng(2).normal(size=(8, 4)), np.zeros(4))
        pool = [small_dataset.instance_at(p) for p in range(1, 11)]
        blank = Instance(x=np.zeros(32), scale=127.0, label=0, id=int(min(inst.id for inst in pool)) - 1)
        assert select_query(extractor, head, pool + [blank]) == blank.id

    def test_ties_go_to_lowest_id(self, extractor, small_dataset):
        head = _head(np.zeros((8, 4)), np.zeros(4))
        pool = [small_dataset.instance_at(p) for p in (7, 3, 9)]
        assert select_query(extractor, head, pool) == min(inst.id for inst in pool)

    def test_matches_brute_force(self):
        f = random_extractor(seed=11, sizes=(6, 5, 4), scale=1.0)
        rng = make_rng(21)
        for trial in range(1000):
            head = _random_head(trial, feature_dim=4, n_classes=3)
            size = int(rng.integers(1, 101))
            ids = rng.choice(10_000, size=size, replace=False)
            pool = [Instance(x=rng.uniform(-1.0, 1.0, size=6), scale=1.0, label=0, id=int(i)) for i in ids]
            best = max(pool, key=lambda inst: (uncertainty(f, head, inst.x), -inst.id))
            assert select_query(f, head, pool) == best.id


class TestOracle:
    def test_poisons_get_base_labels(self, extractor, small_dataset):
        batch = craft_poison_set(extractor, small_dataset, PoisonConfig(max_iters=5), 4, seed=1)
        poisoned = batch.inject(small_dataset)
        oracle = Oracle.from_dataset(poisoned)
        for record in batch.records:
            assert oracle.label(record.poison_id) == small_dataset.instance(record.base_id).label
        assert oracle.label(0) == small_dataset.instance(0).label


def _run(f, ds, budget=10, seed=4, retrain_every=5, **kwargs):
    rows = ds.tagged(SPLIT_TEST2)
    return al_loop(
        f,
        ds,
        Oracle.from_dataset(ds),
        budget,
        8,
        retrain_every,
        HEAD,
        seed,
        eval_set=(ds.inputs[rows], ds.labels[rows]),
        **kwargs,
    )


class TestAlLoop:
    def test_budget_zero_keeps_seed_head(self, extractor, small_dataset):
        state, head = _run(extractor, small_dataset, budget=0)
        assert state.query_trace == [] and state.budget_used == 0
        assert state.retrain_count == 1
        again, head_again = _run(extractor, small_dataset, budget=0)
        assert head.digest() == head_again.digest()

    def test_seed_set_is_stratified_and_clean(self, extractor, small_dataset):
        state, _ = _run(extractor, small_dataset, budget=0)
        labels = [small_dataset.instance(i).label for i in state.seed_ids]
        assert sorted(labels) == [0, 0, 1, 1, 2, 2, 3, 3]
        train_ids = set(small_dataset.ids[small_dataset.tagged(SPLIT_TRAIN)])
        assert set(state.seed_ids) <= train_ids

    def test_trace_invariants(self, extractor, small_dataset):
        state, _ = _run(extractor, small_dataset, budget=20, spot_checks=20)
        ids = state.queried_ids
        assert len(ids) == len(set(ids)) == state.budget_used == 20
        assert not set(state.labeled_ids) & state.pool_ids
        assert [r.step for r in state.query_trace] == list(range(20))
        for record in state.query_trace:
            assert record.label == small_dataset.instance(record.chosen_id).label
            assert 0.0 <= record.uncertainty <= np.log(4) + 1e-12
        assert state.spot_check_violations == 0
        assert [n for n, _ in state.accuracy_curve] == [8, 13, 18, 23, 28]

    def test_whole_pool(self, extractor, small_dataset):
        pool_size = len(small_dataset.tagged(SPLIT_TRAIN)) - 8
        state, _ = _run(extractor, small_dataset, budget=pool_size, retrain_every=20)
        assert sorted(state.queried_ids) == sorted(set(state.queried_ids))
        assert len(state.queried_ids) == pool_size
        assert state.pool_ids == set()

    def test_deterministic(self, extractor, small_dataset):
        first, head = _run(extractor, small_dataset)
        second, head_again = _run(extractor, small_dataset)
        assert first.query_trace == second.query_trace
        assert head.digest() == head_again.digest()

    def test_warm_start(self, extractor, small_dataset):
        state, head = _run(extractor, small_dataset, warm_start=True)
        assert state.budget_used == 10 and head.trained

    def test_budget_exceeds_pool(self, extractor, small_dataset):
        with pytest.raises(BudgetExceedsPool):
            _run(extractor, small_dataset, budget=1000)

    def test_seed_set_too_large(self, extractor, small_dataset):
        with pytest.raises(InsufficientData):
            al_loop(extractor, small_dataset, Oracle.from_dataset(small_dataset), 0, 500, 5, HEAD, 0)

    def test_retrain_interval_must_be_positive(self, extractor, small_dataset):
        with pytest.raises(ConfigError):
            _run(extractor, small_dataset, retrain_every=0)

    def test_poisons_enter_the_pool(self, extractor, small_dataset):
        batch = craft_poison_set(extractor, small_dataset, PoisonConfig(max_iters=5), 4, seed=1)
        poisoned = batch.inject(small_dataset)
        state, _ = _run(extractor, poisoned, budget=len(poisoned.tagged(SPLIT_TRAIN)) - 8, retrain_every=30)
        assert set(batch.poison_ids) <= set(state.queried_ids)
        assert state.poison_queries == 4


class TestFeatureTable:
    @pytest.fixture
    def table(self, small_dataset):
        features = make_rng(31).normal(size=(len(small_dataset), 12))
        features[:, :4] += 3.0 * np.eye(4)[small_dataset.labels]
        return FeatureTable(ids=small_dataset.ids.copy(), features=features)

    def test_features_come_from_the_table(self, extractor, small_dataset, table):
        assert table.feature_dim != extractor.feature_dim
        rows = small_dataset.tagged(SPLIT_TEST2)
        eval_set = (table.lookup(small_dataset.ids[rows]), small_dataset.labels[rows])
        state, head = al_loop(
            extractor,
            small_dataset,
            Oracle.from_dataset(small_dataset),
            10,
            8,
            5,
            HEAD,
            4,
            eval_set=eval_set,
            feature_table=table,
        )
        assert head.layers[0].weight.shape[0] == 12
        assert state.budget_used == 10
        assert [n for n, _ in state.accuracy_curve] == [8, 13, 18]
        assert all(0.0 <= value <= 1.0 for _, value in state.accuracy_curve)

    def test_raw_evaluation_inputs_are_rejected(self, extractor, small_dataset, table):
        with pytest.raises(ShapeMismatch):
            _run(extractor, small_dataset, feature_table=table)

    def test_missing_ids(self, extractor, small_dataset, table):
        partial = FeatureTable(ids=table.ids[:10], features=table.features[:10])
        with pytest.raises(DataError):
            _run(extractor, small_dataset, feature_table=partial)


def test_trace_csv(tmp_path, extractor, small_dataset):
    state, _ = _run(extractor, small_dataset, budget=3)
    write_trace_csv(state.query_trace, tmp_path / "trace.csv")
    with open(tmp_path / "trace.csv", newline="") as handle:
        rows = list(csv.reader(handle))
    assert tuple(rows[0]) == TRACE_COLUMNS
    assert len(rows) == 4
    assert int(rows[1][1]) == state.query_trace[0].chosen_id
