"""Desk-scale end-to-end experiments under the default configuration.

These take minutes each; run them with ``pytest -m slow``.
"""
import numpy as np
import pytest

from collision_lab.config import resolve_config
from collision_lab.const import SPLIT_TEST1, SPLIT_TRAIN
from collision_lab.harness import ExperimentConfig, ExperimentCoordinator
from collision_lab.models import HeadConfig, fit_head

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def desk():
    coordinator = ExperimentCoordinator(ExperimentConfig.from_dict(resolve_config(seed=7)))
    return coordinator, coordinator.report()


def _test1_accuracy(ds, head, features):
    rows = ds.tagged(SPLIT_TEST1)
    predicted = np.argmax(head.probabilities(features[rows]), axis=1)
    return float(np.mean(predicted == ds.labels[rows] - ds.label_offset))


class TestCalibration:
    def test_synthetic_classes_are_linearly_separable(self, desk):
        coordinator, _ = desk
        ds = coordinator.dataset
        rows = ds.tagged(SPLIT_TRAIN)
        scaled = ds.inputs / ds.scale
        linear_head = fit_head(scaled[rows], ds.labels[rows] - ds.label_offset, ds.n_classes, HeadConfig(), seed=1)
        assert _test1_accuracy(ds, linear_head, scaled) > 0.9

    def test_pretraining_reaches_the_auxiliary_target(self, desk):
        coordinator, _ = desk
        assert coordinator.extractor.provenance["aux_val_accuracy"] > 0.8

    def test_seed_set_head_beats_chance(self, desk):
        coordinator, _ = desk
        ds = coordinator.dataset
        state, _ = coordinator.clean_run
        assert len(state.seed_ids) == 20
        seed_rows = ds.positions(state.seed_ids)
        features = coordinator.extractor(ds.inputs)
        labels = ds.labels[seed_rows] - ds.label_offset
        head = fit_head(features[seed_rows], labels, ds.n_classes, HeadConfig(), seed=2)
        assert _test1_accuracy(ds, head, features) > 1.0 / ds.n_classes


def test_poisons_dominate_selection(desk):
    _, report = desk
    assert report.model == "NN1"
    assert report.success_rate_poison >= 0.9


def test_poisoning_damages_accuracy(desk):
    _, report = desk
    assert report.accuracy_poisoned <= report.accuracy_clean - 0.15


def test_random_baseline_is_far_behind(desk):
    coordinator, report = desk
    poisoned_state, _ = coordinator.poisoned_run
    pool_size = len(poisoned_state.pool_ids) + poisoned_state.budget_used
    assert report.success_rate_random == pytest.approx(500 / pool_size, abs=0.01)
    assert report.success_rate_poison >= 5 * report.success_rate_random


def test_collisions_are_tight(desk):
    _, report = desk
    assert report.collision_tightness <= 0.05
    assert report.pca_bbox_ratio <= 0.01


def test_joint_finetuning_recovers(desk):
    coordinator, report = desk
    _, unfrozen = coordinator.defense()
    assert unfrozen.accuracy_poisoned >= report.accuracy_clean - 0.10


def test_outnumbered_poisons_still_selected():
    document = resolve_config(
        overrides=["dataset.n_per_class=400", "experiment.k=64", "experiment.budget=64", "experiment.defense=false"],
        seed=7,
    )
    report = ExperimentCoordinator(ExperimentConfig.from_dict(document)).report()
    assert report.outnumber_ratio >= 49
    assert report.success_rate_poison >= 0.8
