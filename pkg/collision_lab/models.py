"""Frozen feature extractor f, dense head g and their training procedures.

Every layer stores its weight as ``(fan_in, fan_out)`` so a batch ``h`` maps
to ``h @ W + b``. Gradients are hand-derived for the closed op set
(affine, ReLU, inverted dropout, softmax cross-entropy).
"""
import hashlib
import json
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt

from .const import (
    ACTIVATION_LINEAR,
    ACTIVATION_RELU,
    HEAD_NN1,
    HEAD_NN2,
    HEAD_PARAM_CAP,
    HEAD_VARIANTS,
    MANIFEST_FILE,
    MAX_DROPOUT_RATE,
)
from .datasets import Dataset, Instance
from .exceptions import (
    ConfigError,
    DataError,
    InsufficientData,
    PretrainingFailed,
    ShapeMismatch,
)
from .numerics import (
    Matrix,
    Rng,
    as_matrix,
    ensure_finite,
    make_rng,
    relu,
    relu_backward,
    softmax,
    softmax_cross_entropy,
)
from .tensor_io import load_tensor, save_tensor
from .util import canonical_json, derive_seed, write_text_atomic

_LOGGER = getLogger(__name__)

LayerGrads = list[tuple[Matrix, Matrix]]


@dataclass(eq=False)
class DenseLayer:
    weight: Matrix
    bias: Matrix
    activation: str = ACTIVATION_RELU

    @property
    def fan_in(self) -> int:
        return int(self.weight.shape[0])

    @property
    def fan_out(self) -> int:
        return int(self.weight.shape[1])

    @property
    def param_count(self) -> int:
        return int(self.weight.size + self.bias.size)

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weight.copy(), self.bias.copy(), self.activation)


def init_layer(rng: Rng, fan_in: int, fan_out: int, activation: str) -> DenseLayer:
    std = np.sqrt(2.0 / fan_in)
    return DenseLayer(
        weight=rng.normal(0.0, std, size=(fan_in, fan_out)),
        bias=np.zeros(fan_out),
        activation=activation,
    )


def _forward_layers(layers: Sequence[DenseLayer], h: Matrix) -> tuple[Matrix, list[tuple[Matrix, Matrix]]]:
    cache = []
    for layer in layers:
        z = h @ layer.weight + layer.bias
        cache.append((h, z))
        h = z if layer.activation == ACTIVATION_LINEAR else relu(z)
    return h, cache


def _backward_layers(
        layers: Sequence[DenseLayer],
        cache: Sequence[tuple[Matrix, Matrix]],
        upstream: Matrix,
) -> tuple[LayerGrads, Matrix]:
    grads: LayerGrads = [None] * len(layers)  # type: ignore[list-item]
    g = upstream
    for i in reversed(range(len(layers))):
        h_in, z = cache[i]
        dz = g if layers[i].activation == ACTIVATION_LINEAR else relu_backward(z, g)
        grads[i] = (h_in.T @ dz, dz.sum(axis=0))
        g = dz @ layers[i].weight.T
    return grads, g


def _digest(layers: Sequence[DenseLayer]) -> str:
    h = hashlib.sha256()
    for layer in layers:
        h.update(np.ascontiguousarray(layer.weight).tobytes())
        h.update(np.ascontiguousarray(layer.bias).tobytes())
    return h.hexdigest()


@dataclass(eq=False)
class FeatureExtractor:
    """f: raw input -> x / scale -> stacked ReLU layers -> feature vector."""

    layers: list[DenseLayer]
    input_scale: float
    frozen: bool = True
    provenance: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for upper, lower in zip(self.layers, self.layers[1:]):
            if upper.fan_out != lower.fan_in:
                raise ShapeMismatch("extractor layer shapes do not chain")

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].fan_out

    def digest(self) -> str:
        return _digest(self.layers)

    def copy(self, frozen: bool | None = None) -> "FeatureExtractor":
        return FeatureExtractor(
            layers=[layer.copy() for layer in self.layers],
            input_scale=self.input_scale,
            frozen=self.frozen if frozen is None else frozen,
            provenance=dict(self.provenance),
        )

    def _check_inputs(self, x: Matrix) -> Matrix:
        x = as_matrix(x)
        if x.shape[-1] != self.input_dim:
            raise ShapeMismatch(f"expected {self.input_dim} inputs, got {x.shape[-1]}")
        return x

    def forward_cached(self, x: Matrix) -> tuple[Matrix, list[tuple[Matrix, Matrix]]]:
        x = self._check_inputs(x)
        return _forward_layers(self.layers, np.atleast_2d(x) / self.input_scale)

    def backward(self, cache: list[tuple[Matrix, Matrix]], d_features: Matrix) -> tuple[LayerGrads, Matrix]:
        """Parameter gradients and the gradient w.r.t. the raw input."""
        grads, d_normalized = _backward_layers(self.layers, cache, d_features)
        return grads, d_normalized / self.input_scale

    def __call__(self, x: Matrix) -> Matrix:
        x = self._check_inputs(x)
        features, _ = _forward_layers(self.layers, np.atleast_2d(x) / self.input_scale)
        return features[0] if x.ndim == 1 else features


@dataclass(frozen=True)
class HeadConfig:
    variant: str = HEAD_NN1
    hidden_units: int = 32
    dropout_rate: float | None = None
    learning_rate: float = 0.05
    max_epochs: int = 200
    batch_size: int = 32
    patience: int = 10
    validation_fraction: float = 0.2
    lr_halving_patience: int = 0

    def __post_init__(self) -> None:
        if self.variant not in HEAD_VARIANTS:
            raise ConfigError(f"unknown head variant {self.variant!r}", key="head.variant")
        if not 0.0 <= self.effective_dropout <= MAX_DROPOUT_RATE:
            raise ConfigError(f"dropout rate must lie in [0, {MAX_DROPOUT_RATE}]", key="head.dropout_rate")

    @property
    def effective_dropout(self) -> float:
        if self.dropout_rate is not None:
            return self.dropout_rate
        return 0.5 if self.variant == HEAD_NN2 else 0.0

    @property
    def layer_count(self) -> int:
        return 1 if self.variant == HEAD_NN1 else 2


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float | None


@dataclass(eq=False)
class DenseHead:
    """g: one (NN1) or two (NN2) dense layers ending in M logits."""

    layers: list[DenseLayer]
    dropout_rate: float = 0.0
    trained: bool = False
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def __post_init__(self) -> None:
        if len(self.layers) not in (1, 2):
            raise ConfigError("a head has one or two layers", key="head.variant")
        if not 0.0 <= self.dropout_rate <= MAX_DROPOUT_RATE:
            raise ConfigError(f"dropout rate must lie in [0, {MAX_DROPOUT_RATE}]", key="head.dropout_rate")
        if self.param_count > HEAD_PARAM_CAP:
            raise ConfigError(
                f"head has {self.param_count} parameters, cap is {HEAD_PARAM_CAP}", key="head.hidden_units"
            )
        if self.layers[-1].activation != ACTIVATION_LINEAR:
            raise ConfigError("the final head layer must be linear", key="head.variant")

    @classmethod
    def initialize(cls, feature_dim: int, n_classes: int, config: HeadConfig, rng: Rng) -> "DenseHead":
        if config.variant == HEAD_NN1:
            layers = [init_layer(rng, feature_dim, n_classes, ACTIVATION_LINEAR)]
        else:
            layers = [
                init_layer(rng, feature_dim, config.hidden_units, ACTIVATION_RELU),
                init_layer(rng, config.hidden_units, n_classes, ACTIVATION_LINEAR),
            ]
        return cls(layers=layers, dropout_rate=config.effective_dropout)

    @property
    def variant(self) -> str:
        return HEAD_NN1 if len(self.layers) == 1 else HEAD_NN2

    @property
    def feature_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def n_classes(self) -> int:
        return self.layers[-1].fan_out

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    def digest(self) -> str:
        return _digest(self.layers)

    def copy(self) -> "DenseHead":
        return DenseHead(
            layers=[layer.copy() for layer in self.layers],
            dropout_rate=self.dropout_rate,
            trained=self.trained,
            history=list(self.history),
            best_epoch=self.best_epoch,
        )

    def forward_cached(self, features: Matrix, rng: Rng | None = None) -> tuple[Matrix, dict[str, Any]]:
        """Logits; dropout on the last layer's input is applied only when `rng` is given."""
        features = as_matrix(features)
        if features.shape[-1] != self.feature_dim:
            raise ShapeMismatch(f"expected {self.feature_dim} features, got {features.shape[-1]}")
        hidden, hidden_cache = _forward_layers(self.layers[:-1], np.atleast_2d(features))
        mask = None
        if rng is not None and self.dropout_rate > 0.0:
            keep = 1.0 - self.dropout_rate
            mask = (rng.random(hidden.shape) < keep) / keep
            hidden = hidden * mask
        logits, final_cache = _forward_layers(self.layers[-1:], hidden)
        return logits, {"hidden": hidden_cache, "mask": mask, "final": final_cache}

    def backward(self, cache: dict[str, Any], d_logits: Matrix) -> tuple[LayerGrads, Matrix]:
        final_grads, d_hidden = _backward_layers(self.layers[-1:], cache["final"], d_logits)
        if cache["mask"] is not None:
            d_hidden = d_hidden * cache["mask"]
        hidden_grads, d_features = _backward_layers(self.layers[:-1], cache["hidden"], d_hidden)
        return hidden_grads + final_grads, d_features

    def probabilities(self, features: Matrix) -> Matrix:
        logits, _ = self.forward_cached(features)
        return softmax(logits)


@dataclass(frozen=True, eq=False)
class Prediction:
    y_pred: Matrix
    predicted_class: int


@dataclass(frozen=True)
class ExtractorConfig:
    layer_sizes: tuple[int, ...] = (128, 64)
    learning_rate: float = 0.05
    batch_size: int = 64
    max_epochs: int = 60
    patience: int = 8
    validation_fraction: float = 0.2


@dataclass(frozen=True)
class FinetuneConfig:
    learning_rate: float = 0.05
    extractor_learning_rate: float = 0.01
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    validation_fraction: float = 0.2


def _validation_split(labels: npt.NDArray[np.int64], fraction: float, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Shuffled train/validation positions; every class keeps one training row."""
    n = labels.shape[0]
    order = rng.permutation(n)
    n_val = int(np.floor(n * fraction))
    if n_val < 1 or n - n_val < 1:
        return np.sort(order), np.array([], dtype=np.int64)
    remaining = {int(c): int(np.sum(labels == c)) for c in np.unique(labels)}
    val: list[int] = []
    train: list[int] = []
    for pos in order:
        label = int(labels[pos])
        if len(val) < n_val and remaining[label] > 1:
            val.append(int(pos))
            remaining[label] -= 1
        else:
            train.append(int(pos))
    return np.array(train, dtype=np.int64), np.array(val, dtype=np.int64)


class _Network:
    """Optional trainable extractor stacked under a head, as one optimisation unit."""

    def __init__(self, head: DenseHead, extractor: FeatureExtractor | None = None) -> None:
        self.head = head
        self.extractor = extractor

    def forward(self, x: Matrix, rng: Rng | None) -> tuple[Matrix, tuple]:
        if self.extractor is None:
            logits, head_cache = self.head.forward_cached(x, rng)
            return logits, (None, head_cache)
        features, f_cache = self.extractor.forward_cached(x)
        logits, head_cache = self.head.forward_cached(features, rng)
        return logits, (f_cache, head_cache)

    def step(self, cache: tuple, d_logits: Matrix, lr_head: float, lr_extractor: float) -> None:
        f_cache, head_cache = cache
        head_grads, d_features = self.head.backward(head_cache, d_logits)
        extractor_grads = None
        if self.extractor is not None:
            extractor_grads, _ = self.extractor.backward(f_cache, d_features)
        for layer, (dw, db) in zip(self.head.layers, head_grads):
            layer.weight -= lr_head * dw
            layer.bias -= lr_head * db
        if extractor_grads is not None:
            for layer, (dw, db) in zip(self.extractor.layers, extractor_grads):
                layer.weight -= lr_extractor * dw
                layer.bias -= lr_extractor * db

    def loss(self, x: Matrix, labels: npt.NDArray[np.int64]) -> float:
        logits, _ = self.forward(x, None)
        loss, _ = softmax_cross_entropy(logits, labels)
        return loss

    def accuracy(self, x: Matrix, labels: npt.NDArray[np.int64]) -> float:
        logits, _ = self.forward(x, None)
        return float(np.mean(np.argmax(logits, axis=1) == labels)) if labels.size else 0.0

    def snapshot(self) -> list[DenseLayer]:
        layers = [layer.copy() for layer in self.head.layers]
        if self.extractor is not None:
            layers += [layer.copy() for layer in self.extractor.layers]
        return layers

    def restore(self, snapshot: list[DenseLayer]) -> None:
        n_head = len(self.head.layers)
        self.head.layers = snapshot[:n_head]
        if self.extractor is not None:
            self.extractor.layers = snapshot[n_head:]


def _train(
        network: _Network,
        x: Matrix,
        labels: npt.NDArray[np.int64],
        *,
        learning_rate: float,
        extractor_learning_rate: float,
        batch_size: int,
        max_epochs: int,
        patience: int,
        validation_fraction: float,
        lr_halving_patience: int,
        rng: Rng,
        on_epoch: Callable[[EpochRecord], None] | None = None,
) -> tuple[list[EpochRecord], int, np.ndarray]:
    """Mini-batch gradient descent with early stopping; restores the best epoch."""
    train_rows, val_rows = _validation_split(labels, validation_fraction, rng)
    x_train, y_train = x[train_rows], labels[train_rows]
    x_val, y_val = x[val_rows], labels[val_rows]
    history: list[EpochRecord] = []
    best_loss = np.inf
    best_epoch = 0
    best_state = network.snapshot()
    since_best = 0
    lr_head, lr_extractor = learning_rate, extractor_learning_rate
    for epoch in range(1, max_epochs + 1):
        order = rng.permutation(train_rows.size)
        total = 0.0
        for start in range(0, order.size, batch_size):
            batch = order[start:start + batch_size]
            logits, cache = network.forward(x_train[batch], rng)
            loss, d_logits = softmax_cross_entropy(logits, y_train[batch])
            ensure_finite(loss, "training loss")
            network.step(cache, d_logits, lr_head, lr_extractor)
            total += loss * batch.size
        train_loss = total / max(order.size, 1)
        ensure_finite(train_loss, "training loss")
        if val_rows.size == 0:
            record = EpochRecord(epoch, train_loss, None)
            history.append(record)
            best_epoch, best_state = epoch, network.snapshot()
            if on_epoch is not None:
                on_epoch(record)
            continue
        val_loss = network.loss(x_val, y_val)
        ensure_finite(val_loss, "validation loss")
        record = EpochRecord(epoch, train_loss, val_loss)
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if val_loss < best_loss:
            best_loss, best_epoch, best_state = val_loss, epoch, network.snapshot()
            since_best = 0
            continue
        since_best += 1
        if lr_halving_patience and since_best % lr_halving_patience == 0:
            lr_head *= 0.5
            lr_extractor *= 0.5
        if since_best >= patience:
            _LOGGER.debug("early stopping at epoch %d, best epoch %d", epoch, best_epoch)
            break
    network.restore(best_state)
    return history, best_epoch, val_rows


def pretrain_extractor(
        aux: Dataset,
        config: ExtractorConfig,
        seed: int,
        transfer_labels: set[int] | None = None,
) -> FeatureExtractor:
    """Train f with a throw-away softmax head on the auxiliary task, then freeze it."""
    if aux.n_classes < 2:
        raise InsufficientData(f"auxiliary task needs at least 2 classes, got {aux.n_classes}")
    if transfer_labels is not None and aux.label_set & transfer_labels:
        raise DataError("auxiliary and transfer label sets overlap")
    if not config.layer_sizes:
        raise ConfigError("extractor needs at least one layer", key="extractor.layer_sizes")
    rng = make_rng(derive_seed(seed, "pretrain"))
    sizes = (aux.input_dim, *config.layer_sizes)
    extractor = FeatureExtractor(
        layers=[init_layer(rng, fan_in, fan_out, ACTIVATION_RELU) for fan_in, fan_out in zip(sizes, sizes[1:])],
        input_scale=aux.scale,
        frozen=False,
    )
    head = DenseHead(layers=[init_layer(rng, extractor.feature_dim, aux.n_classes, ACTIVATION_LINEAR)])
    network = _Network(head, extractor)
    labels = aux.labels - aux.label_offset
    history, best_epoch, val_rows = _train(
        network,
        aux.inputs,
        labels,
        learning_rate=config.learning_rate,
        extractor_learning_rate=config.learning_rate,
        batch_size=config.batch_size,
        max_epochs=config.max_epochs,
        patience=config.patience,
        validation_fraction=config.validation_fraction,
        lr_halving_patience=0,
        rng=rng,
        on_epoch=lambda r: _LOGGER.debug("pretrain epoch %d train %.4f val %s", r.epoch, r.train_loss, r.val_loss),
    )
    eval_rows = val_rows if val_rows.size else np.arange(len(aux))
    accuracy = network.accuracy(aux.inputs[eval_rows], labels[eval_rows])
    chance = 1.0 / aux.n_classes
    if accuracy < 2.0 * chance:
        raise PretrainingFailed(f"auxiliary validation accuracy {accuracy:.3f} is below twice chance")
    extractor = network.extractor
    extractor.frozen = True
    extractor.provenance = {
        "seed": int(seed),
        "aux_val_accuracy": accuracy,
        "aux_classes": aux.n_classes,
        "best_epoch": best_epoch,
        "epochs_run": len(history),
    }
    _LOGGER.info("pretrained extractor: aux validation accuracy %.3f after %d epochs", accuracy, len(history))
    return extractor


def extract_features(f: FeatureExtractor, x: Matrix) -> Matrix:
    return f(x)


def fit_head(
        features: Matrix,
        labels: npt.NDArray[np.int64],
        n_classes: int,
        config: HeadConfig,
        seed: int,
        warm_start: DenseHead | None = None,
) -> DenseHead:
    """Train a head directly on feature vectors."""
    features = as_matrix(features)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size < n_classes:
        raise InsufficientData(f"{labels.size} labeled instances for {n_classes} classes")
    rng = make_rng(derive_seed(seed, "head"))
    if warm_start is not None:
        head = warm_start.copy()
    else:
        head = DenseHead.initialize(features.shape[1], n_classes, config, rng)
    network = _Network(head)
    history, best_epoch, _ = _train(
        network,
        features,
        labels,
        learning_rate=config.learning_rate,
        extractor_learning_rate=0.0,
        batch_size=config.batch_size,
        max_epochs=config.max_epochs,
        patience=config.patience,
        validation_fraction=config.validation_fraction,
        lr_halving_patience=config.lr_halving_patience,
        rng=rng,
    )
    head.trained = True
    head.history = history
    head.best_epoch = best_epoch
    return head


def train_head(
        f: FeatureExtractor,
        labeled: Sequence[tuple[Instance, int]],
        n_classes: int,
        config: HeadConfig,
        seed: int,
) -> DenseHead:
    if not f.frozen:
        raise DataError("train_head expects a frozen extractor")
    if len(labeled) < n_classes:
        raise InsufficientData(f"{len(labeled)} labeled instances for {n_classes} classes")
    inputs = np.stack([instance.x for instance, _ in labeled])
    labels = np.array([label for _, label in labeled], dtype=np.int64)
    return fit_head(f(inputs), labels, n_classes, config, seed)


def predict_proba(f: FeatureExtractor, g: DenseHead, x: Matrix) -> Matrix:
    """Class probabilities for a batch; dropout is never applied here."""
    return g.probabilities(np.atleast_2d(f(x)))


def predict(f: FeatureExtractor, g: DenseHead, x: Matrix) -> Prediction:
    y_pred = predict_proba(f, g, x)[0]
    return Prediction(y_pred=y_pred, predicted_class=int(np.argmax(y_pred)))


def accuracy(f: FeatureExtractor, g: DenseHead, x: Matrix, labels: npt.ArrayLike) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return 0.0
    return float(np.mean(np.argmax(predict_proba(f, g, x), axis=1) == labels))


def joint_finetune(
        f: FeatureExtractor,
        g: DenseHead,
        inputs: Matrix,
        labels: npt.ArrayLike,
        config: FinetuneConfig,
        seed: int,
) -> tuple[FeatureExtractor, DenseHead]:
    """Train copies of f and g together; the originals are left untouched."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise InsufficientData("joint fine-tuning needs a non-empty labeled set")
    extractor = f.copy(frozen=False)
    head = g.copy()
    network = _Network(head, extractor)
    history, best_epoch, _ = _train(
        network,
        as_matrix(inputs),
        labels,
        learning_rate=config.learning_rate,
        extractor_learning_rate=config.extractor_learning_rate,
        batch_size=config.batch_size,
        max_epochs=config.max_epochs,
        patience=config.patience,
        validation_fraction=config.validation_fraction,
        lr_halving_patience=0,
        rng=make_rng(derive_seed(seed, "finetune")),
    )
    head.trained = True
    head.history = history
    head.best_epoch = best_epoch
    extractor.provenance = {**f.provenance, "finetuned": True, "finetune_seed": int(seed)}
    _LOGGER.info("joint fine-tune finished after %d epochs (best %d)", len(history), best_epoch)
    return extractor, head


def _save_layers(layers: Sequence[DenseLayer], directory: Path, prefix: str) -> list[dict[str, Any]]:
    entries = []
    for i, layer in enumerate(layers):
        weight_file = f"{prefix}{i}_weight.atf"
        bias_file = f"{prefix}{i}_bias.atf"
        save_tensor(directory / weight_file, layer.weight)
        save_tensor(directory / bias_file, layer.bias)
        entries.append({
            "weight": weight_file,
            "bias": bias_file,
            "shape": [layer.fan_in, layer.fan_out],
            "activation": layer.activation,
        })
    return entries


def _load_layers(entries: Sequence[dict[str, Any]], directory: Path) -> list[DenseLayer]:
    layers = []
    for entry in entries:
        weight = load_tensor(directory / entry["weight"]).astype(np.float64)
        if list(weight.shape) != list(entry["shape"]):
            raise ShapeMismatch(f"{entry['weight']} has shape {weight.shape}, manifest says {entry['shape']}")
        bias = load_tensor(directory / entry["bias"]).astype(np.float64)
        layers.append(DenseLayer(weight, bias, entry["activation"]))
    return layers


def save_extractor(f: FeatureExtractor, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "extractor",
        "input_scale": f.input_scale,
        "frozen": f.frozen,
        "layers": _save_layers(f.layers, directory, "layer"),
        "provenance": f.provenance,
    }
    write_text_atomic(directory / MANIFEST_FILE, canonical_json(manifest))


def load_extractor(directory: str | Path) -> FeatureExtractor:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_FILE).read_text(encoding="utf-8"))
    return FeatureExtractor(
        layers=_load_layers(manifest["layers"], directory),
        input_scale=float(manifest["input_scale"]),
        frozen=bool(manifest["frozen"]),
        provenance=manifest.get("provenance", {}),
    )


def save_head(g: DenseHead, directory: str | Path, seed: int | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": "head",
        "variant": g.variant,
        "dropout_rate": g.dropout_rate,
        "trained": g.trained,
        "best_epoch": g.best_epoch,
        "layers": _save_layers(g.layers, directory, "head"),
        "provenance_seed": seed,
    }
    write_text_atomic(directory / MANIFEST_FILE, canonical_json(manifest))


def load_head(directory: str | Path) -> DenseHead:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_FILE).read_text(encoding="utf-8"))
    return DenseHead(
        layers=_load_layers(manifest["layers"], directory),
        dropout_rate=float(manifest["dropout_rate"]),
        trained=bool(manifest["trained"]),
        best_epoch=int(manifest.get("best_epoch", 0)),
    )
