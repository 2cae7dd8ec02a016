"""Synthetic desk-scale dataset, stratified 80/10/10 split and on-disk layout."""
import json
from collections.abc import Iterator, Sequence
from dataclasses import dataclass, field, replace
from logging import getLogger
from pathlib import Path

import numpy as np
import numpy.typing as npt

from .const import (
    MANIFEST_FILE,
    MIN_DATASET_SIZE,
    MIN_INSTANCES_PER_CLASS_FOR_SPLIT,
    NO_BASE_ID,
    SPLIT_FRACTIONS,
    SPLIT_TAGS,
    SPLIT_TEST1,
    SPLIT_TEST2,
    SPLIT_TRAIN,
)
from .exceptions import DataError, DatasetTooSmall, ShapeMismatch, StratificationError
from .numerics import Matrix, make_rng
from .tensor_io import load_tensor, save_tensor
from .util import canonical_json, derive_seed, write_text_atomic

_LOGGER = getLogger(__name__)

TEMPLATE_PEAK: float = 0.5
MAX_FREQUENCIES: int = 6


@dataclass(frozen=True, eq=False)
class Instance:
    x: Matrix
    scale: float
    label: int
    id: int
    is_poison: bool = False
    base_id: int | None = None

    def __post_init__(self) -> None:
        if self.is_poison != (self.base_id is not None):
            raise DataError(f"instance {self.id}: base_id must be set exactly for poisons")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column store of instances; rows are addressed by position, instances by id."""

    inputs: Matrix
    labels: npt.NDArray[np.int64]
    ids: npt.NDArray[np.int64]
    n_classes: int
    scale: float
    is_poison: npt.NDArray[np.bool_]
    base_ids: npt.NDArray[np.int64]
    split_tags: tuple[str, ...] | None = None
    label_offset: int = 0
    name: str = "synthetic"
    _positions: dict[int, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = self.inputs.shape[0]
        if self.inputs.ndim != 2:
            raise ShapeMismatch("inputs must be a 2-d array")
        for column in (self.labels, self.ids, self.is_poison, self.base_ids):
            if column.shape != (n,):
                raise ShapeMismatch("column lengths disagree with the input rows")
        if self.split_tags is not None and len(self.split_tags) != n:
            raise ShapeMismatch("one split tag per instance is required")
        positions = {int(i): pos for pos, i in enumerate(self.ids)}
        if len(positions) != n:
            raise DataError("instance ids are not unique")
        object.__setattr__(self, "_positions", positions)

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def __iter__(self) -> Iterator[Instance]:
        for pos in range(len(self)):
            yield self.instance_at(pos)

    @property
    def input_dim(self) -> int:
        return int(self.inputs.shape[1])

    @property
    def label_set(self) -> set[int]:
        return set(range(self.label_offset, self.label_offset + self.n_classes))

    def instance_at(self, pos: int) -> Instance:
        poison = bool(self.is_poison[pos])
        return Instance(
            x=self.inputs[pos],
            scale=self.scale,
            label=int(self.labels[pos]),
            id=int(self.ids[pos]),
            is_poison=poison,
            base_id=int(self.base_ids[pos]) if poison else None,
        )

    def position(self, instance_id: int) -> int:
        try:
            return self._positions[int(instance_id)]
        except KeyError as err:
            raise DataError(f"unknown instance id {instance_id}") from err

    def positions(self, instance_ids: Sequence[int]) -> npt.NDArray[np.int64]:
        return np.array([self.position(i) for i in instance_ids], dtype=np.int64)

    def instance(self, instance_id: int) -> Instance:
        return self.instance_at(self.position(instance_id))

    def tagged(self, tag: str) -> npt.NDArray[np.int64]:
        """Row positions carrying `tag`, in id order."""
        if self.split_tags is None:
            raise StratificationError("dataset has no split tags")
        rows = np.array([pos for pos, t in enumerate(self.split_tags) if t == tag], dtype=np.int64)
        return rows[np.argsort(self.ids[rows], kind="stable")] if rows.size else rows

    def with_split_tags(self, tags: Sequence[str]) -> "Dataset":
        return replace(self, split_tags=tuple(tags))

    def with_instances(self, instances: Sequence[Instance], tag: str = SPLIT_TRAIN) -> "Dataset":
        """Return a new dataset with `instances` appended under `tag`."""
        if not instances:
            return self
        for inst in instances:
            if inst.x.shape != (self.input_dim,):
                raise ShapeMismatch(f"instance {inst.id} has {inst.x.shape[0]} inputs")
        tags = None
        if self.split_tags is not None:
            tags = self.split_tags + (tag,) * len(instances)
        return replace(
            self,
            inputs=np.vstack([self.inputs, np.stack([inst.x for inst in instances])]),
            labels=np.concatenate([self.labels, [inst.label for inst in instances]]).astype(np.int64),
            ids=np.concatenate([self.ids, [inst.id for inst in instances]]).astype(np.int64),
            is_poison=np.concatenate([self.is_poison, [inst.is_poison for inst in instances]]).astype(bool),
            base_ids=np.concatenate(
                [self.base_ids, [-1 if inst.base_id is None else inst.base_id for inst in instances]]
            ).astype(np.int64),
            split_tags=tags,
        )

    @property
    def next_id(self) -> int:
        return int(self.ids.max()) + 1 if len(self) else 0


def smooth_basis(input_dim: int) -> Matrix:
    """Low-frequency sine/cosine rows shared by every class geometry."""
    n_freq = max(1, min(MAX_FREQUENCIES, input_dim // 16))
    t = np.arange(input_dim, dtype=np.float64) / input_dim
    rows = []
    for k in range(1, n_freq + 1):
        rows.append(np.cos(2.0 * np.pi * k * t))
        rows.append(np.sin(2.0 * np.pi * k * t))
    return np.stack(rows)


def class_templates(n_classes: int, input_dim: int, scale: float, class_geometry_seed: int) -> Matrix:
    basis = smooth_basis(input_dim)
    rng = make_rng(derive_seed(class_geometry_seed, "templates"))
    templates = rng.normal(size=(n_classes, basis.shape[0])) @ basis
    peaks = np.max(np.abs(templates), axis=1, keepdims=True)
    return templates / peaks * (TEMPLATE_PEAK * scale)


def generate_synthetic(
        n_per_class: int,
        n_classes: int,
        input_dim: int,
        scale: float,
        class_geometry_seed: int,
        noise_level: float,
        *,
        label_offset: int = 0,
        id_offset: int = 0,
        tag: str | None = None,
        name: str = "synthetic",
) -> Dataset:
    """Per-class smooth templates plus smooth and white noise, clipped to ±scale."""
    if n_classes < 2:
        raise DataError(f"need at least 2 classes, got {n_classes}")
    if input_dim < 8:
        raise DataError(f"input_dim must be at least 8, got {input_dim}")
    if noise_level < 0:
        raise DataError(f"noise_level must be non-negative, got {noise_level}")
    if scale <= 0:
        raise DataError(f"scale must be positive, got {scale}")
    if n_per_class * n_classes < MIN_DATASET_SIZE:
        raise DatasetTooSmall(
            f"{n_per_class} x {n_classes} instances is below the minimum of {MIN_DATASET_SIZE}"
        )

    basis = smooth_basis(input_dim)
    templates = class_templates(n_classes, input_dim, scale, class_geometry_seed)
    rng = make_rng(derive_seed(class_geometry_seed, "samples"))
    n = n_per_class * n_classes
    classes = np.repeat(np.arange(n_classes), n_per_class)
    smooth = rng.normal(size=(n, basis.shape[0])) @ basis / np.sqrt(basis.shape[0] / 2.0)
    white = rng.normal(size=(n, input_dim))
    inputs = templates[classes] + noise_level * scale * (smooth + white)
    inputs = np.clip(inputs, -scale, scale)
    _LOGGER.debug(
        "generated %d instances, %d classes, input_dim %d, noise %.3f", n, n_classes, input_dim, noise_level
    )
    return Dataset(
        inputs=inputs,
        labels=(classes + label_offset).astype(np.int64),
        ids=np.arange(id_offset, id_offset + n, dtype=np.int64),
        n_classes=n_classes,
        scale=float(scale),
        is_poison=np.zeros(n, dtype=bool),
        base_ids=np.full(n, -1, dtype=np.int64),
        split_tags=None if tag is None else (tag,) * n,
        label_offset=label_offset,
        name=name,
    )


def _split_counts(n: int) -> tuple[int, int, int]:
    n_test1 = int(np.floor(n * SPLIT_FRACTIONS[SPLIT_TEST1] + 0.5))
    n_test2 = int(np.floor(n * SPLIT_FRACTIONS[SPLIT_TEST2] + 0.5))
    return n - n_test1 - n_test2, n_test1, n_test2


def split_dataset(ds: Dataset, seed: int) -> Dataset:
    """Stratified 80/10/10 assignment of train/test1/test2 tags."""
    if ds.split_tags is not None:
        raise StratificationError("dataset already carries split tags")
    rng = make_rng(derive_seed(seed, "split"))
    tags: list[str] = [""] * len(ds)
    for label in sorted(set(int(v) for v in ds.labels)):
        rows = np.flatnonzero(ds.labels == label)
        if rows.size < MIN_INSTANCES_PER_CLASS_FOR_SPLIT:
            raise StratificationError(
                f"class {label} has {rows.size} instances, at least "
                f"{MIN_INSTANCES_PER_CLASS_FOR_SPLIT} are needed"
            )
        rows = rows[rng.permutation(rows.size)]
        n_train, n_test1, _ = _split_counts(rows.size)
        for i, pos in enumerate(rows):
            if i < n_train:
                tags[pos] = SPLIT_TRAIN
            elif i < n_train + n_test1:
                tags[pos] = SPLIT_TEST1
            else:
                tags[pos] = SPLIT_TEST2
    return ds.with_split_tags(tags)


def save_dataset(ds: Dataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {
        "inputs": "inputs.atf",
        "labels": "labels.atf",
        "ids": "ids.atf",
        "is_poison": "is_poison.atf",
        "base_ids": "base_ids.atf",
    }
    save_tensor(directory / files["inputs"], ds.inputs)
    save_tensor(directory / files["labels"], ds.labels.astype(np.uint32))
    save_tensor(directory / files["ids"], ds.ids.astype(np.uint32))
    save_tensor(directory / files["is_poison"], ds.is_poison.astype(np.uint32))
    save_tensor(
        directory / files["base_ids"],
        np.where(ds.base_ids < 0, NO_BASE_ID, ds.base_ids).astype(np.uint32),
    )
    manifest = {
        "name": ds.name,
        "files": files,
        "split_tags": None if ds.split_tags is None else list(ds.split_tags),
        "M": ds.n_classes,
        "input_dim": ds.input_dim,
        "scale": ds.scale,
        "label_offset": ds.label_offset,
    }
    write_text_atomic(directory / MANIFEST_FILE, canonical_json(manifest))


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_FILE).read_text(encoding="utf-8"))
    files = manifest["files"]
    inputs = load_tensor(directory / files["inputs"]).astype(np.float64)
    if inputs.ndim != 2 or inputs.shape[1] != manifest["input_dim"]:
        raise ShapeMismatch(f"{directory}: inputs do not match the declared input_dim")
    base_ids = load_tensor(directory / files["base_ids"]).astype(np.int64)
    tags = manifest["split_tags"]
    if tags is not None and not set(tags) <= set(SPLIT_TAGS):
        raise DataError(f"{directory}: unknown split tags {sorted(set(tags) - set(SPLIT_TAGS))}")
    return Dataset(
        inputs=inputs,
        labels=load_tensor(directory / files["labels"]).astype(np.int64),
        ids=load_tensor(directory / files["ids"]).astype(np.int64),
        n_classes=int(manifest["M"]),
        scale=float(manifest["scale"]),
        is_poison=load_tensor(directory / files["is_poison"]).astype(bool),
        base_ids=np.where(base_ids == NO_BASE_ID, -1, base_ids),
        split_tags=None if tags is None else tuple(tags),
        label_offset=int(manifest.get("label_offset", 0)),
        name=manifest.get("name", "synthetic"),
    )


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Externally computed extractor features keyed by instance id."""

    ids: npt.NDArray[np.int64]
    features: Matrix

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or self.features.shape[0] != self.ids.shape[0]:
            raise ShapeMismatch("feature rows must match the id list")

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def lookup(self, instance_ids: Sequence[int]) -> Matrix:
        index = {int(i): pos for pos, i in enumerate(self.ids)}
        try:
            rows = [index[int(i)] for i in instance_ids]
        except KeyError as err:
            raise DataError(f"no precomputed features for instance {err.args[0]}") from err
        return self.features[np.array(rows, dtype=np.int64)] if rows else np.zeros((0, self.feature_dim))

    def save(self, features_path: str | Path, ids_path: str | Path) -> None:
        save_tensor(features_path, self.features)
        save_tensor(ids_path, self.ids.astype(np.uint32))

    @classmethod
    def load(cls, features_path: str | Path, ids_path: str | Path) -> "FeatureTable":
        return cls(
            ids=load_tensor(ids_path).astype(np.int64),
            features=load_tensor(features_path).astype(np.float64),
        )
