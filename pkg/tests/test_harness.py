import copy
import json
from dataclasses import replace

import numpy as np
import pytest
from scipy import linalg, stats

from collision_lab.active import QueryRecord
from collision_lab.datasets import FeatureTable
from collision_lab.exceptions import ConfigError, DegenerateVariance, InsufficientData, SchemaVersionMismatch
from collision_lab.harness import (
    ExperimentConfig,
    ExperimentCoordinator,
    ExperimentReport,
    PcaProjection,
    bounding_box_ratio,
    experiment_seeds,
    mean_pairwise_distance,
    pca_project,
    poison_success_rate,
    random_baseline,
    random_baseline_stats,
    read_report,
    run_defense,
    run_experiment,
    write_report,
)
from collision_lab.numerics import make_rng


def _trace(flags):
    return [QueryRecord(step, step, 0.5, flag, 0) for step, flag in enumerate(flags)]


class TestPoisonSuccessRate:
    def test_all_queried(self):
        assert poison_success_rate(_trace([True] * 500), 500) == 1.0

    def test_partial(self):
        flags = [True] * 430 + [False] * 70
        assert poison_success_rate(_trace(flags), 500) == pytest.approx(0.86)

    def test_none_queried(self):
        assert poison_success_rate(_trace([False] * 500), 500) == 0.0

    def test_budget_smaller_than_k(self):
        assert poison_success_rate(_trace([True, True, False, False]), 8) == 0.5

    def test_undefined(self):
        with pytest.raises(InsufficientData):
            poison_success_rate(_trace([True]), 0)
        with pytest.raises(InsufficientData):
            poison_success_rate([], 5)


class TestRandomBaseline:
    def test_matches_hypergeometric_mean(self):
        mean, stderr = random_baseline_stats(10, 2, 5, 2000, seed=1)
        expected = stats.hypergeom(10, 2, 5).mean() / 2
        assert expected == pytest.approx(0.5)
        assert abs(mean - expected) <= 3 * stderr

    def test_whole_pool(self):
        assert random_baseline(10, 2, 10, 50, seed=1) == 1.0

    def test_zero_budget(self):
        assert random_baseline(10, 2, 0, 50, seed=1) == 0.0

    def test_desk_scale(self):
        mean, stderr = random_baseline_stats(3700, 500, 500, 2000, seed=3)
        assert abs(mean - 500 / 3700) <= 4 * stderr
        assert mean == pytest.approx(0.135, abs=0.01)

    def test_seeded(self):
        assert random_baseline(100, 10, 20, 300, seed=4) == random_baseline(100, 10, 20, 300, seed=4)

    @pytest.mark.parametrize("args", [(10, 0, 5), (10, 11, 5), (10, 2, 11)])
    def test_invalid(self, args):
        with pytest.raises(InsufficientData):
            random_baseline(*args, trials=10, seed=0)


class TestPcaProject:
    def test_identical_rows(self):
        with pytest.raises(DegenerateVariance):
            pca_project(np.ones((5, 3)), np.zeros(5))

    def test_too_few_rows(self):
        with pytest.raises(InsufficientData):
            pca_project(np.eye(2, 3), np.zeros(2))

    def test_points_on_a_line(self):
        t = np.linspace(-1.0, 1.0, 9)
        points = np.outer(t, [1.0, 2.0, 2.0])
        projection = pca_project(points, np.zeros(9))
        assert projection.explained_variance[0] == pytest.approx(1.0)
        assert projection.explained_variance[1] == 0.0
        np.testing.assert_allclose(projection.axes[0], [1 / 3, 2 / 3, 2 / 3], atol=1e-9)
        assert abs(projection.axes[0] @ projection.axes[1]) < 1e-12
        np.testing.assert_allclose(projection.coordinates[:, 1], 0.0, atol=1e-9)

    def test_matches_eigendecomposition(self):
        x = make_rng(5).normal(size=(50, 5)) * np.array([5.0, 3.0, 2.0, 1.0, 0.5])
        projection = pca_project(x, np.zeros(50))
        centered = x - x.mean(axis=0)
        values, vectors = linalg.eigh(centered.T @ centered / 49)
        for i in range(2):
            expected = vectors[:, -1 - i]
            assert min(np.abs(projection.axes[i] - expected).max(), np.abs(projection.axes[i] + expected).max()) < 1e-6
        np.testing.assert_allclose(projection.explained_variance, values[::-1][:2] / values.sum(), rtol=1e-6)
        np.testing.assert_allclose(projection.axes @ projection.axes.T, np.eye(2), atol=1e-9)

    def test_sign_convention(self):
        x = make_rng(6).normal(size=(20, 4))
        for axis in pca_project(x, np.zeros(20)).axes:
            assert axis[np.argmax(np.abs(axis))] > 0.0

    def test_bounding_box_ratio(self):
        points = np.array([[0.0, 0.0], [4.0, 0.0], [0.0, 4.0], [4.0, 4.0], [1.0, 1.0], [2.0, 3.0]])
        flags = np.array([False, False, False, False, True, True])
        projection = PcaProjection(np.eye(2), points, flags, np.zeros(6, dtype=np.int64), (0.5, 0.5), np.zeros(2))
        assert bounding_box_ratio(projection) == pytest.approx(2.0 / 16.0)
        clean_only = replace(projection, is_poison=np.zeros(6, dtype=bool))
        assert bounding_box_ratio(clean_only) is None


def test_mean_pairwise_distance():
    assert mean_pairwise_distance(np.array([[0.0, 0.0], [3.0, 4.0]])) == 5.0
    assert mean_pairwise_distance(np.zeros((1, 2))) == 0.0


def test_seeds_differ_per_purpose():
    seeds = experiment_seeds(7)
    assert seeds["master"] == 7
    derived = [value for key, value in seeds.items() if key != "master"]
    assert len(set(derived)) == len(derived)
    assert experiment_seeds(7) == seeds


@pytest.fixture
def coordinator(small_config):
    return ExperimentCoordinator(ExperimentConfig.from_dict(small_config))


class TestExperiment:
    def test_report_fields(self, coordinator):
        report = coordinator.report()
        assert report.n_poison == 4
        assert report.model == "NN1"
        assert 0.0 <= report.accuracy_clean <= 1.0
        assert 0.0 <= report.success_rate_poison <= 1.0
        assert 0.0 <= report.success_rate_random <= 1.0
        assert report.loss_adv <= report.loss_initial
        assert report.queries_on_poisons == round(report.success_rate_poison * 4)
        assert report.outnumber_ratio == pytest.approx(64 / 4 - 2)
        assert report.seeds == experiment_seeds(7)

    def test_deterministic(self, small_config):
        first = ExperimentCoordinator(ExperimentConfig.from_dict(small_config)).report()
        second = ExperimentCoordinator(ExperimentConfig.from_dict(small_config)).report()
        assert first.without_timing() == second.without_timing()

    def test_clean_and_poisoned_share_the_seed_set(self, coordinator):
        clean_state, _ = coordinator.clean_run
        poisoned_state, _ = coordinator.poisoned_run
        assert clean_state.seed_ids == poisoned_state.seed_ids

    def test_no_poisons(self, small_config):
        small_config["experiment"]["k"] = 0
        report = run_experiment(ExperimentConfig.from_dict(small_config))
        assert report.accuracy_clean == report.accuracy_poisoned
        assert report.success_rate_poison is None and report.success_rate_random is None
        assert report.n_poison == 0 and report.loss_adv == 0.0

    def test_defense_pair(self, coordinator):
        frozen, unfrozen = run_defense(coordinator.cfg, coordinator)
        assert frozen.extractor_mode == "frozen" and unfrozen.extractor_mode == "unfrozen"
        assert frozen.success_rate_poison == unfrozen.success_rate_poison
        assert 0.0 <= unfrozen.accuracy_poisoned <= 1.0

    def test_projection_flags_the_poisons(self, coordinator):
        projection = coordinator.projection
        assert int(projection.is_poison.sum()) == 4
        assert projection.coordinates.shape == (68, 2)

    def test_precomputed_features(self, tmp_path, small_config, coordinator):
        ds = coordinator.poisoned_dataset
        features = make_rng(12).normal(size=(len(ds), 12))
        features[:, :4] += 3.0 * np.eye(4)[ds.labels]
        FeatureTable(ids=ds.ids, features=features).save(tmp_path / "features.atf", tmp_path / "ids.atf")
        document = copy.deepcopy(small_config)
        document["dataset"]["features"] = {"features": str(tmp_path / "features.atf"), "ids": str(tmp_path / "ids.atf")}
        document["experiment"]["defense"] = False
        imported = ExperimentCoordinator(
            ExperimentConfig.from_dict(document),
            dataset=coordinator.dataset,
            extractor=coordinator.extractor,
            poison_batch=coordinator.poison_batch,
        )
        report = imported.report()
        _, head = imported.poisoned_run
        assert head.layers[0].weight.shape[0] == 12
        assert report.n_poison == 4
        assert 0.0 <= report.accuracy_poisoned <= 1.0
        assert imported.projection.coordinates.shape == (68, 2)
        with pytest.raises(ConfigError):
            imported.defense()


class TestReportDocument:
    def test_round_trip(self, tmp_path, coordinator):
        report = coordinator.report()
        write_report(report, tmp_path)
        loaded = read_report(tmp_path / "report.json")
        assert loaded.to_json() == report.to_json()

    def test_version_mismatch(self, tmp_path, coordinator):
        document = json.loads(coordinator.report().to_json())
        document["schema_version"] = 99
        with pytest.raises(SchemaVersionMismatch):
            ExperimentReport.from_dict(document)

    def test_unknown_field(self, coordinator):
        document = json.loads(coordinator.report().to_json())
        document["surprise"] = 1
        with pytest.raises(SchemaVersionMismatch):
            ExperimentReport.from_dict(document)

    def test_without_timing_drops_workers(self, coordinator):
        document = coordinator.report().without_timing()
        assert "craft_time_seconds" not in document
        assert "workers" not in document["config"]["experiment"]
