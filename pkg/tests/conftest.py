import numpy as np
import pytest

from collision_lab.config import resolve_config
from collision_lab.const import ACTIVATION_RELU
from collision_lab.datasets import Dataset, generate_synthetic, split_dataset
from collision_lab.models import FeatureExtractor, init_layer
from collision_lab.numerics import make_rng

SMALL_OVERRIDES = (
    "dataset.n_per_class=20",
    "dataset.n_classes=4",
    "dataset.input_dim=32",
    "aux.n_per_class=30",
    "aux.n_classes=4",
    "aux.noise_level=0.05",
    "extractor.layer_sizes=[16, 8]",
    "extractor.batch_size=16",
    "extractor.max_epochs=80",
    "head.max_epochs=30",
    "finetune.max_epochs=20",
    "experiment.k=4",
    "experiment.budget=10",
    "experiment.seed_set_size=8",
    "experiment.retrain_every=5",
    "experiment.random_trials=200",
    "poison.max_iters=100",
)


def random_extractor(seed: int = 5, sizes: tuple[int, ...] = (32, 16, 8), scale: float = 127.0) -> FeatureExtractor:
    rng = make_rng(seed)
    layers = [init_layer(rng, a, b, ACTIVATION_RELU) for a, b in zip(sizes, sizes[1:])]
    return FeatureExtractor(layers=layers, input_scale=scale, frozen=True)


@pytest.fixture
def small_dataset() -> Dataset:
    """80 instances, 4 classes, input_dim 32, already split."""
    return split_dataset(generate_synthetic(20, 4, 32, 127.0, 3, 0.15), seed=9)


@pytest.fixture
def extractor() -> FeatureExtractor:
    return random_extractor()


@pytest.fixture
def small_config() -> dict:
    return resolve_config(overrides=SMALL_OVERRIDES, seed=7)


@pytest.fixture
def rng() -> np.random.Generator:
    return make_rng(1234)
