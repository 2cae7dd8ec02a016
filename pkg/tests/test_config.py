import json

import pytest

from collision_lab.config import DEFAULT_CONFIG, load_config_file, resolve_config, validate_config
from collision_lab.exceptions import ConfigError
from collision_lab.harness import ExperimentConfig


def test_defaults_are_valid():
    resolved = resolve_config()
    assert resolved == validate_config(DEFAULT_CONFIG)
    cfg = ExperimentConfig.from_dict(resolved)
    assert cfg.k == 500 and cfg.budget == 500
    assert cfg.poison.resolved_beta == 1e-8
    assert cfg.extractor.layer_sizes == (128, 64)


def test_defaults_are_not_mutated():
    resolve_config(overrides=["experiment.k=3"])
    assert DEFAULT_CONFIG["experiment"]["k"] == 500


@pytest.mark.parametrize(
    ("override", "key"),
    [
        ("experiment.bogus=1", "experiment.bogus"),
        ("head.dropout_rate=0.9", "head.dropout_rate"),
        ("head.variant=NN3", "head.variant"),
        ("dataset.n_classes=1", "dataset.n_classes"),
        ("experiment.retrain_every=0", "experiment.retrain_every"),
        ("poison.norm_mode=l1", "poison.norm_mode"),
    ],
)
def test_invalid_values_name_their_key(override, key):
    with pytest.raises(ConfigError) as err:
        resolve_config(overrides=[override])
    assert err.value.key == key
    assert err.value.exit_code == 2


def test_override_values_are_typed():
    resolved = resolve_config(
        overrides=["experiment.k=64", "experiment.defense=false", "extractor.layer_sizes=[32, 16]", "poison.beta=0.5"]
    )
    assert resolved["experiment"]["k"] == 64
    assert resolved["experiment"]["defense"] is False
    assert resolved["extractor"]["layer_sizes"] == [32, 16]
    assert resolved["poison"]["beta"] == 0.5


def test_malformed_override():
    with pytest.raises(ConfigError):
        resolve_config(overrides=["experiment.k"])


def test_seed_and_workers_flags_win(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"experiment": {"seed": 3, "workers": 2}}))
    resolved = resolve_config(path, overrides=["experiment.seed=4"], seed=9, workers=4)
    assert resolved["experiment"]["seed"] == 9
    assert resolved["experiment"]["workers"] == 4


def test_file_is_merged_over_defaults(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"head": {"variant": "NN2"}}))
    resolved = resolve_config(path, overrides=["head.hidden_units=16"])
    assert resolved["head"]["variant"] == "NN2"
    assert resolved["head"]["hidden_units"] == 16
    assert resolved["head"]["max_epochs"] == DEFAULT_CONFIG["head"]["max_epochs"]


@pytest.mark.parametrize("content", ["{not json", "[1, 2]"])
def test_bad_config_file(tmp_path, content):
    path = tmp_path / "config.json"
    path.write_text(content)
    with pytest.raises(ConfigError):
        load_config_file(path)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        resolve_config(tmp_path / "absent.json")


def test_seed_set_must_cover_every_class():
    with pytest.raises(ConfigError) as err:
        resolve_config(overrides=["experiment.seed_set_size=5"])
    assert err.value.key == "experiment.seed_set_size"


def test_explicit_mu_must_match_feature_size():
    with pytest.raises(ConfigError) as err:
        resolve_config(overrides=["poison.mu=[0.0, 1.0]"])
    assert err.value.key == "poison.mu"
    resolved = resolve_config(overrides=["extractor.layer_sizes=[8, 2]", "poison.mu=[0.0, 1.0]"])
    assert ExperimentConfig.from_dict(resolved).poison.mu == (0.0, 1.0)


def test_feature_table_paths():
    features = 'dataset.features={"features": "f.atf", "ids": "ids.atf"}'
    resolved = resolve_config(overrides=[features, "experiment.defense=false"])
    assert ExperimentConfig.from_dict(resolved).dataset.features == {"features": "f.atf", "ids": "ids.atf"}
    with pytest.raises(ConfigError) as err:
        resolve_config(overrides=[features])
    assert err.value.key == "experiment.defense"
    with pytest.raises(ConfigError) as err:
        resolve_config(overrides=['dataset.features={"features": "f.atf"}', "experiment.defense=false"])
    assert err.value.key.startswith("dataset.features")
