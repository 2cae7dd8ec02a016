"""Pool-based active learning with entropy sampling and a simulated oracle."""
import csv
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from logging import getLogger
from pathlib import Path

import numpy as np
import numpy.typing as npt

from .const import CURVE_COLUMNS, SPLIT_TRAIN, TRACE_COLUMNS
from .datasets import Dataset, FeatureTable, Instance
from .exceptions import (
    BudgetExceedsPool,
    ConfigError,
    DataError,
    EmptyPool,
    InsufficientData,
    ShapeMismatch,
    UntrainedHead,
)
from .models import DenseHead, FeatureExtractor, HeadConfig, fit_head, predict
from .numerics import Matrix, Rng, as_matrix, entropy, entropy_rows, make_rng
from .util import derive_seed

_LOGGER = getLogger(__name__)


@dataclass(frozen=True)
class QueryRecord:
    step: int
    chosen_id: int
    uncertainty: float
    was_poison: bool
    label: int


@dataclass(eq=False)
class ALState:
    labeled_ids: list[int]
    pool_ids: set[int]
    query_trace: list[QueryRecord] = field(default_factory=list)
    head: DenseHead | None = None
    budget_used: int = 0
    seed_ids: list[int] = field(default_factory=list)
    labels: dict[int, int] = field(default_factory=dict)
    accuracy_curve: list[tuple[int, float]] = field(default_factory=list)
    retrain_count: int = 0
    spot_check_violations: int = 0

    @property
    def queried_ids(self) -> list[int]:
        return [record.chosen_id for record in self.query_trace]

    @property
    def poison_queries(self) -> int:
        return sum(1 for record in self.query_trace if record.was_poison)


class Oracle:
    """Ground-truth annotator; poisons are labeled with their base instance's class."""

    def __init__(self, labels: Mapping[int, int]) -> None:
        self._labels = dict(labels)

    @classmethod
    def from_dataset(cls, ds: Dataset) -> "Oracle":
        labels: dict[int, int] = {}
        for pos in range(len(ds)):
            instance_id = int(ds.ids[pos])
            label = int(ds.labels[pos])
            if ds.is_poison[pos]:
                base_id = int(ds.base_ids[pos])
                try:
                    label = int(ds.labels[ds.position(base_id)])
                except DataError:
                    _LOGGER.debug("base %d of poison %d is not in the dataset", base_id, instance_id)
            labels[instance_id] = label
        return cls(labels)

    def label(self, instance_id: int) -> int:
        try:
            return self._labels[int(instance_id)]
        except KeyError as err:
            raise DataError(f"oracle has no label for instance {instance_id}") from err


def uncertainty(f: FeatureExtractor, g: DenseHead, x: Matrix) -> float:
    if not g.trained:
        raise UntrainedHead("uncertainty needs a trained head")
    return entropy(predict(f, g, x).y_pred)


def _pool_uncertainties(g: DenseHead, features: Matrix) -> Matrix:
    if len(features) == 0:
        return np.zeros(0)
    return entropy_rows(g.probabilities(features))


def _argmax_lowest_id(values: Matrix, ids: npt.NDArray[np.int64]) -> int:
    """Index of the maximum; among equal maxima the one with the lowest id."""
    best = np.max(values)
    tied = np.flatnonzero(values == best)
    return int(tied[np.argmin(ids[tied])])


def select_query(f: FeatureExtractor, g: DenseHead, pool: Sequence[Instance]) -> int:
    """Id of the most uncertain pool instance."""
    if not pool:
        raise EmptyPool("cannot select from an empty pool")
    if not g.trained:
        raise UntrainedHead("select_query needs a trained head")
    ids = np.array([inst.id for inst in pool], dtype=np.int64)
    values = _pool_uncertainties(g, f(np.stack([inst.x for inst in pool])))
    return int(ids[_argmax_lowest_id(values, ids)])


def _stratified_seed_rows(ds: Dataset, rows: npt.NDArray[np.int64], size: int, rng: Rng) -> list[int]:
    """Round-robin over classes, each class's rows in seeded random order."""
    if size > rows.size:
        raise InsufficientData(f"seed set of {size} from {rows.size} clean training instances")
    by_class: dict[int, list[int]] = {}
    for label in sorted(set(int(v) for v in ds.labels[rows])):
        members = rows[ds.labels[rows] == label]
        by_class[label] = [int(p) for p in members[rng.permutation(members.size)]]
    chosen: list[int] = []
    depth = 0
    while len(chosen) < size:
        for members in by_class.values():
            if depth < len(members) and len(chosen) < size:
                chosen.append(members[depth])
        depth += 1
    return chosen


def al_loop(
        f: FeatureExtractor,
        ds: Dataset,
        oracle: Oracle,
        budget: int,
        seed_set_size: int,
        retrain_every: int,
        head_cfg: HeadConfig,
        seed: int,
        *,
        warm_start: bool = False,
        eval_set: tuple[Matrix, npt.ArrayLike] | None = None,
        feature_table: FeatureTable | None = None,
        spot_checks: int = 0,
) -> tuple[ALState, DenseHead]:
    """Seed a head on clean train instances, then query `budget` pool instances one by one.

    The pool is every training-split instance outside the seed set, poisons
    included. Entropies are recomputed once per head version.

    With a `feature_table` the seed set and pool are featurized by id lookup
    and `f` is never called; `eval_set` then carries features from the same
    table instead of raw inputs.
    """
    if retrain_every < 1:
        raise ConfigError("retrain_every must be at least 1", key="experiment.retrain_every")
    if budget < 0:
        raise ConfigError("budget must be non-negative", key="experiment.budget")
    train_rows = ds.tagged(SPLIT_TRAIN)
    clean_rows = train_rows[~ds.is_poison[train_rows]]
    seed_rows = _stratified_seed_rows(ds, clean_rows, seed_set_size, make_rng(derive_seed(seed, "seed-set")))
    seeded = set(seed_rows)
    pool_rows = np.array([pos for pos in train_rows if int(pos) not in seeded], dtype=np.int64)
    if budget > pool_rows.size:
        raise BudgetExceedsPool(f"budget {budget} exceeds the pool of {pool_rows.size}")

    pool_ids = ds.ids[pool_rows]
    if feature_table is not None:
        seed_features = feature_table.lookup(ds.ids[seed_rows])
        pool_features = feature_table.lookup(pool_ids)
    else:
        seed_features = f(ds.inputs[seed_rows])
        pool_features = f(ds.inputs[pool_rows]) if pool_rows.size else np.zeros((0, f.feature_dim))
    n_classes = ds.n_classes
    offset = ds.label_offset
    eval_features = eval_labels = None
    if eval_set is not None:
        eval_x, eval_y = eval_set
        eval_features = as_matrix(eval_x) if feature_table is not None else f(eval_x)
        eval_labels = np.asarray(eval_y, dtype=np.int64) - offset
        if eval_features.ndim != 2 or eval_features.shape[1] != seed_features.shape[1]:
            raise ShapeMismatch(
                f"evaluation features have shape {eval_features.shape}, training features {seed_features.shape[1]}"
            )

    state = ALState(labeled_ids=[int(ds.ids[p]) for p in seed_rows], pool_ids={int(i) for i in pool_ids})
    state.seed_ids = list(state.labeled_ids)
    state.labels = {i: oracle.label(i) for i in state.labeled_ids}
    labeled_features = [seed_features[i] for i in range(len(seed_rows))]

    def retrain(previous: DenseHead | None) -> DenseHead:
        labels = np.array([state.labels[i] - offset for i in state.labeled_ids], dtype=np.int64)
        head = fit_head(
            np.stack(labeled_features),
            labels,
            n_classes,
            head_cfg,
            derive_seed(seed, "retrain", state.retrain_count),
            warm_start=previous if warm_start else None,
        )
        state.retrain_count += 1
        if eval_features is not None:
            predicted = np.argmax(head.probabilities(eval_features), axis=1)
            state.accuracy_curve.append((len(state.labeled_ids), float(np.mean(predicted == eval_labels))))
        return head

    head = retrain(None)
    values = _pool_uncertainties(head, pool_features)
    available = np.ones(pool_rows.size, dtype=bool)
    check_rng = make_rng(derive_seed(seed, "spot-check"))

    for step in range(budget):
        masked = np.where(available, values, -np.inf)
        j = _argmax_lowest_id(masked, np.where(available, pool_ids, np.iinfo(np.int64).max))
        chosen_id = int(pool_ids[j])
        if spot_checks:
            state.spot_check_violations += _spot_check(
                head, pool_features, available, values[j], spot_checks, check_rng
            )
        label = oracle.label(chosen_id)
        was_poison = bool(ds.is_poison[pool_rows[j]])
        state.query_trace.append(QueryRecord(step, chosen_id, float(values[j]), was_poison, label))
        available[j] = False
        state.pool_ids.discard(chosen_id)
        state.labeled_ids.append(chosen_id)
        state.labels[chosen_id] = label
        labeled_features.append(pool_features[j])
        state.budget_used += 1
        if (step + 1) % retrain_every == 0 or step + 1 == budget:
            head = retrain(head)
            values = _pool_uncertainties(head, pool_features)
            _LOGGER.debug(
                "retrain %d after %d queries, %d on poisons", state.retrain_count, step + 1, state.poison_queries
            )

    state.head = head
    _LOGGER.info(
        "active learning finished: %d queries, %d on poisons, %d retrains",
        state.budget_used,
        state.poison_queries,
        state.retrain_count,
    )
    return state, head


def _spot_check(
        head: DenseHead,
        pool_features: Matrix,
        available: npt.NDArray[np.bool_],
        chosen_value: float,
        count: int,
        rng: Rng,
) -> int:
    """Re-evaluate random pool instances one at a time; count any that beat the chosen one."""
    candidates = np.flatnonzero(available)
    picks = rng.choice(candidates, size=min(count, candidates.size), replace=False)
    violations = 0
    for i in picks:
        value = entropy(head.probabilities(pool_features[i])[0])
        if value > chosen_value + 1e-12:
            violations += 1
    return violations


def write_trace_csv(trace: Sequence[QueryRecord], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TRACE_COLUMNS)
        for record in trace:
            writer.writerow(
                [record.step, record.chosen_id, repr(record.uncertainty), int(record.was_poison), record.label]
            )


def write_curve_csv(curve: Sequence[tuple[int, float]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(CURVE_COLUMNS)
        for labeled, value in curve:
            writer.writerow([labeled, repr(value)])
