"""Experiment configuration: documented defaults, schema and resolution order.

defaults <- config file <- ``--set dotted.key=value`` <- ``--seed`` / ``--workers``
"""
import copy
import json
from collections.abc import Iterable
from logging import getLogger
from pathlib import Path
from typing import Any

import voluptuous as vol

from .const import (
    CONF_AUX,
    CONF_DATASET,
    CONF_EXPERIMENT,
    CONF_EXTRACTOR,
    CONF_FINETUNE,
    CONF_HEAD,
    CONF_POISON,
    HEAD_PARAM_CAP,
    HEAD_VARIANTS,
    MAX_DROPOUT_RATE,
    MODALITY_PRESETS,
    MU_KINDS,
    NORM_MODES,
)
from .exceptions import ConfigError
from .util import deep_merge, parse_override

_LOGGER = getLogger(__name__)

DEFAULT_CONFIG: dict[str, dict[str, Any]] = {
    CONF_EXPERIMENT: {
        "name": "desk",
        "seed": 0,
        "k": 500,
        "budget": 500,
        "seed_set_size": 20,
        "retrain_every": 25,
        "warm_start": False,
        "defense": True,
        "workers": 1,
        "random_trials": 2000,
        "spot_checks": 0,
    },
    CONF_DATASET: {
        "name": "synthetic",
        "n_per_class": 500,
        "n_classes": 10,
        "input_dim": 256,
        "scale": 127.0,
        "noise_level": 0.15,
        "features": None,
    },
    CONF_AUX: {
        "n_per_class": 300,
        "n_classes": 10,
        "noise_level": 0.15,
    },
    CONF_EXTRACTOR: {
        "layer_sizes": [128, 64],
        "learning_rate": 0.05,
        "batch_size": 64,
        "max_epochs": 60,
        "patience": 8,
        "validation_fraction": 0.2,
    },
    CONF_HEAD: {
        "variant": "NN1",
        "hidden_units": 32,
        "dropout_rate": None,
        "learning_rate": 0.05,
        "max_epochs": 200,
        "batch_size": 32,
        "patience": 10,
        "validation_fraction": 0.2,
        "lr_halving_patience": 0,
    },
    CONF_FINETUNE: {
        "learning_rate": 0.05,
        "extractor_learning_rate": 0.01,
        "batch_size": 32,
        "max_epochs": 200,
        "patience": 10,
        "validation_fraction": 0.2,
    },
    CONF_POISON: {
        "modality": "image",
        "norm_mode": "squared",
        "mu_kind": "zero",
        "mu": None,
        "beta": None,
        "max_iters": None,
        "lr": 0.01,
        "lr_adapt": True,
        "lr_growth": 1.2,
        "early_stop_tol": 1e-8,
        "clip_to_scale": True,
        "balance_classes": True,
    },
}


def _count(minimum: int = 0, maximum: int | None = None) -> vol.All:
    return vol.All(vol.Coerce(int), vol.Range(min=minimum, max=maximum))


def _real(minimum: float | None = None, maximum: float | None = None, **kwargs: bool) -> vol.All:
    return vol.All(vol.Coerce(float), vol.Range(min=minimum, max=maximum, **kwargs))


_FRACTION = _real(0.0, 1.0, max_included=False)
_POSITIVE = _real(0.0, min_included=False)

CONFIG_SCHEMA = vol.Schema(
    {
        vol.Required(CONF_EXPERIMENT): {
            vol.Required("name"): str,
            vol.Required("seed"): _count(0, 2**63 - 1),
            vol.Required("k"): _count(),
            vol.Required("budget"): _count(),
            vol.Required("seed_set_size"): _count(1),
            vol.Required("retrain_every"): _count(1),
            vol.Required("warm_start"): bool,
            vol.Required("defense"): bool,
            vol.Required("workers"): _count(1, 256),
            vol.Required("random_trials"): _count(1),
            vol.Required("spot_checks"): _count(),
        },
        vol.Required(CONF_DATASET): {
            vol.Required("name"): str,
            vol.Required("n_per_class"): _count(1),
            vol.Required("n_classes"): _count(2),
            vol.Required("input_dim"): _count(8),
            vol.Required("scale"): _POSITIVE,
            vol.Required("noise_level"): _real(0.0),
            vol.Required("features"): vol.Any(None, {vol.Required("features"): str, vol.Required("ids"): str}),
        },
        vol.Required(CONF_AUX): {
            vol.Required("n_per_class"): _count(1),
            vol.Required("n_classes"): _count(2),
            vol.Required("noise_level"): _real(0.0),
        },
        vol.Required(CONF_EXTRACTOR): {
            vol.Required("layer_sizes"): vol.All([_count(1)], vol.Length(min=1)),
            vol.Required("learning_rate"): _POSITIVE,
            vol.Required("batch_size"): _count(1),
            vol.Required("max_epochs"): _count(1),
            vol.Required("patience"): _count(1),
            vol.Required("validation_fraction"): _FRACTION,
        },
        vol.Required(CONF_HEAD): {
            vol.Required("variant"): vol.In(list(HEAD_VARIANTS)),
            vol.Required("hidden_units"): _count(1, HEAD_PARAM_CAP),
            vol.Required("dropout_rate"): vol.Any(None, _real(0.0, MAX_DROPOUT_RATE)),
            vol.Required("learning_rate"): _POSITIVE,
            vol.Required("max_epochs"): _count(1),
            vol.Required("batch_size"): _count(1),
            vol.Required("patience"): _count(1),
            vol.Required("validation_fraction"): _FRACTION,
            vol.Required("lr_halving_patience"): _count(),
        },
        vol.Required(CONF_FINETUNE): {
            vol.Required("learning_rate"): _POSITIVE,
            vol.Required("extractor_learning_rate"): _real(0.0),
            vol.Required("batch_size"): _count(1),
            vol.Required("max_epochs"): _count(1),
            vol.Required("patience"): _count(1),
            vol.Required("validation_fraction"): _FRACTION,
        },
        vol.Required(CONF_POISON): {
            vol.Required("modality"): vol.In(list(MODALITY_PRESETS)),
            vol.Required("norm_mode"): vol.In(list(NORM_MODES)),
            vol.Required("mu_kind"): vol.In(list(MU_KINDS)),
            vol.Required("mu"): vol.Any(None, [vol.Coerce(float)]),
            vol.Required("beta"): vol.Any(None, _real(0.0)),
            vol.Required("max_iters"): vol.Any(None, _count(1)),
            vol.Required("lr"): _POSITIVE,
            vol.Required("lr_adapt"): bool,
            vol.Required("lr_growth"): _real(1.0),
            vol.Required("early_stop_tol"): _real(0.0),
            vol.Required("clip_to_scale"): bool,
            vol.Required("balance_classes"): bool,
        },
    }
)


def _nested(key: str, value: Any) -> dict[str, Any]:
    document: Any = value
    for part in reversed(key.split(".")):
        document = {part: document}
    return document


def validate_config(document: dict[str, Any]) -> dict[str, Any]:
    try:
        resolved = CONFIG_SCHEMA(document)
    except vol.MultipleInvalid as err:
        first = err.errors[0]
        key = ".".join(str(part) for part in first.path) or None
        raise ConfigError(first.error_message, key=key) from err
    _check_consistency(resolved)
    return resolved


def _check_consistency(document: dict[str, Any]) -> None:
    experiment = document[CONF_EXPERIMENT]
    dataset = document[CONF_DATASET]
    if experiment["seed_set_size"] < dataset["n_classes"]:
        raise ConfigError(
            f"seed set of {experiment['seed_set_size']} cannot cover {dataset['n_classes']} classes",
            key="experiment.seed_set_size",
        )
    if dataset["features"] is not None and experiment["defense"]:
        raise ConfigError(
            "fine-tuning needs raw inputs; disable it when dataset.features is set", key="experiment.defense"
        )
    mu = document[CONF_POISON]["mu"]
    layer_sizes = document[CONF_EXTRACTOR]["layer_sizes"]
    if mu is not None and len(mu) != layer_sizes[-1]:
        raise ConfigError(f"μ has length {len(mu)}, features have {layer_sizes[-1]}", key="poison.mu")


def load_config_file(path: str | Path) -> dict[str, Any]:
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as err:
        raise ConfigError(f"cannot read config file {path}: {err.strerror}") from err
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err.msg}") from err
    if not isinstance(document, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return document


def resolve_config(
        path: str | Path | None = None,
        overrides: Iterable[str] = (),
        seed: int | None = None,
        workers: int | None = None,
) -> dict[str, Any]:
    """Fully resolved and validated configuration document."""
    document = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        document = deep_merge(document, load_config_file(path))
    for override in overrides:
        try:
            key, value = parse_override(override)
        except ValueError as err:
            raise ConfigError(str(err)) from err
        document = deep_merge(document, _nested(key, value))
    if seed is not None:
        document = deep_merge(document, _nested("experiment.seed", seed))
    if workers is not None:
        document = deep_merge(document, _nested("experiment.workers", workers))
    resolved = validate_config(document)
    _LOGGER.debug("resolved configuration %s", resolved)
    return resolved
