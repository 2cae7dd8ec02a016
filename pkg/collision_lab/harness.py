"""End-to-end experiments: clean and poisoned active-learning runs, baselines, PCA and defense."""
import csv
import json
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from logging import getLogger
from pathlib import Path
from typing import Any

import numpy as np
import numpy.typing as npt

from .active import ALState, Oracle, QueryRecord, al_loop, write_curve_csv, write_trace_csv
from .attack import PoisonBatch, PoisonConfig, craft_poison_set, save_poison_batch
from .const import (
    AUX_DIR,
    CONF_AUX,
    CONF_DATASET,
    CONF_EXPERIMENT,
    CONF_EXTRACTOR,
    CONF_FINETUNE,
    CONF_HEAD,
    CONF_POISON,
    CURVE_CLEAN_FILE,
    CURVE_POISONED_FILE,
    DATASET_DIR,
    DEFENSE_FILE,
    EXTRACTOR_DIR,
    PCA_COLUMNS,
    PCA_FILE,
    POISON_DIR,
    REPORT_FILE,
    REPORT_ROW_FILE,
    REPORT_SCHEMA_VERSION,
    SEED_PURPOSES,
    SPLIT_AUX,
    SPLIT_TEST2,
    SPLIT_TRAIN,
    TABLE_COLUMNS,
    TIMING_FIELDS,
    TRACE_CLEAN_FILE,
    TRACE_POISONED_FILE,
)
from .datasets import Dataset, FeatureTable, generate_synthetic, save_dataset, split_dataset
from .exceptions import ConfigError, DataError, DegenerateVariance, InsufficientData, SchemaVersionMismatch
from .models import (
    DenseHead,
    ExtractorConfig,
    FeatureExtractor,
    FinetuneConfig,
    HeadConfig,
    accuracy,
    joint_finetune,
    pretrain_extractor,
    save_extractor,
)
from .numerics import Matrix, as_matrix, make_rng
from .util import canonical_json, derive_seed, safely_get_json_value, write_text_atomic

_LOGGER = getLogger(__name__)

POWER_ITERATION_MAX_STEPS: int = 20000
POWER_ITERATION_TOLERANCE: float = 1e-14
ZERO_VARIANCE_RATIO: float = 1e-12


@dataclass(frozen=True)
class DatasetConfig:
    name: str = "synthetic"
    n_per_class: int = 500
    n_classes: int = 10
    input_dim: int = 256
    scale: float = 127.0
    noise_level: float = 0.15
    features: dict[str, str] | None = None


@dataclass(frozen=True)
class AuxConfig:
    n_per_class: int = 300
    n_classes: int = 10
    noise_level: float = 0.15


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig
    aux: AuxConfig
    extractor: ExtractorConfig
    head: HeadConfig
    finetune: FinetuneConfig
    poison: PoisonConfig
    k: int
    budget: int
    seed_set_size: int
    retrain_every: int
    seed: int
    defense: bool
    warm_start: bool = False
    workers: int = 1
    random_trials: int = 2000
    spot_checks: int = 0
    name: str = "desk"
    document: dict[str, Any] = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_dict(cls, document: dict[str, Any]) -> "ExperimentConfig":
        """Build from a resolved configuration document (see `config.resolve_config`)."""

        def section(name: str) -> dict[str, Any]:
            return dict(safely_get_json_value(document, name) or {})

        extractor = section(CONF_EXTRACTOR)
        extractor["layer_sizes"] = tuple(extractor.get("layer_sizes", (128, 64)))
        poison = section(CONF_POISON)
        if poison.get("mu") is not None:
            poison["mu"] = tuple(poison["mu"])
        return cls(
            dataset=DatasetConfig(**section(CONF_DATASET)),
            aux=AuxConfig(**section(CONF_AUX)),
            extractor=ExtractorConfig(**extractor),
            head=HeadConfig(**section(CONF_HEAD)),
            finetune=FinetuneConfig(**section(CONF_FINETUNE)),
            poison=PoisonConfig(**poison),
            k=safely_get_json_value(document, f"{CONF_EXPERIMENT}.k", int),
            budget=safely_get_json_value(document, f"{CONF_EXPERIMENT}.budget", int),
            seed_set_size=safely_get_json_value(document, f"{CONF_EXPERIMENT}.seed_set_size", int),
            retrain_every=safely_get_json_value(document, f"{CONF_EXPERIMENT}.retrain_every", int),
            seed=safely_get_json_value(document, f"{CONF_EXPERIMENT}.seed", int),
            defense=safely_get_json_value(document, f"{CONF_EXPERIMENT}.defense", bool),
            warm_start=safely_get_json_value(document, f"{CONF_EXPERIMENT}.warm_start", bool),
            workers=safely_get_json_value(document, f"{CONF_EXPERIMENT}.workers", int),
            random_trials=safely_get_json_value(document, f"{CONF_EXPERIMENT}.random_trials", int),
            spot_checks=safely_get_json_value(document, f"{CONF_EXPERIMENT}.spot_checks", int),
            name=safely_get_json_value(document, f"{CONF_EXPERIMENT}.name", str),
            document=document,
        )

    @property
    def seeds(self) -> dict[str, int]:
        return experiment_seeds(self.seed)


def experiment_seeds(master: int) -> dict[str, int]:
    return {"master": int(master), **{purpose: derive_seed(master, purpose) for purpose in SEED_PURPOSES}}


@dataclass(frozen=True)
class ExperimentReport:
    dataset_name: str
    model: str
    accuracy_clean: float
    accuracy_poisoned: float
    loss_adv: float
    loss_initial: float
    n_poison: int
    success_rate_poison: float | None
    success_rate_random: float | None
    craft_time_seconds: float
    perturbation: dict[str, float]
    queries_on_poisons: int
    outnumber_ratio: float | None
    collision_tightness: float | None
    poison_spread_ratio: float | None
    pca_bbox_ratio: float | None
    extractor_mode: str = "frozen"
    config: dict[str, Any] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def without_timing(self) -> dict[str, Any]:
        """The report minus wall-time fields and the worker count, which never affect results."""
        document = self.to_dict()
        for name in TIMING_FIELDS:
            document.pop(name, None)
        document["config"].get(CONF_EXPERIMENT, {}).pop("workers", None)
        return document

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, document: dict[str, Any], source: str = "<memory>") -> "ExperimentReport":
        version = document.get("schema_version")
        if version != REPORT_SCHEMA_VERSION:
            raise SchemaVersionMismatch(
                f"report schema version {version!r}, expected {REPORT_SCHEMA_VERSION}", path=source
            )
        try:
            return cls(**document)
        except TypeError as err:
            raise SchemaVersionMismatch(f"report fields do not match schema: {err}", path=source) from err

    def table_row(self) -> list[Any]:
        return [
            self.dataset_name,
            self.model,
            self.accuracy_clean,
            self.accuracy_poisoned,
            self.loss_adv,
            self.loss_initial,
            self.n_poison,
            "" if self.success_rate_poison is None else self.success_rate_poison,
            "" if self.success_rate_random is None else self.success_rate_random,
            self.craft_time_seconds,
        ]


@dataclass(frozen=True, eq=False)
class PcaProjection:
    axes: Matrix
    coordinates: Matrix
    is_poison: npt.NDArray[np.bool_]
    labels: npt.NDArray[np.int64]
    explained_variance: tuple[float, float]
    mean: Matrix


def poison_success_rate(trace: list[QueryRecord], k: int) -> float:
    """Fraction of the attainable poison queries that were spent on poisons."""
    if k <= 0:
        raise InsufficientData("success rate is undefined without poisons")
    attainable = min(k, len(trace))
    if attainable == 0:
        raise InsufficientData("success rate is undefined for an empty trace")
    return sum(1 for record in trace if record.was_poison) / attainable


def random_baseline_stats(pool_size: int, k: int, budget: int, trials: int, seed: int) -> tuple[float, float]:
    """Mean and standard error of the fraction of k poisons hit by uniform draws."""
    if not 0 < k <= pool_size:
        raise InsufficientData(f"need 0 < k <= pool size, got k={k}, pool={pool_size}")
    if not 0 <= budget <= pool_size:
        raise InsufficientData(f"budget {budget} exceeds the pool of {pool_size}")
    if trials < 1:
        raise InsufficientData("at least one trial is required")
    if budget == pool_size:
        return 1.0, 0.0
    if budget == 0:
        return 0.0, 0.0
    rng = make_rng(derive_seed(seed, "random-baseline"))
    hits = rng.hypergeometric(k, pool_size - k, budget, size=trials) / k
    stderr = float(np.std(hits, ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    return float(np.mean(hits)), stderr


def random_baseline(pool_size: int, k: int, budget: int, trials: int, seed: int) -> float:
    mean, _ = random_baseline_stats(pool_size, k, budget, trials, seed)
    return mean


def _power_iteration(matrix: Matrix) -> Matrix:
    d = matrix.shape[0]
    v = np.linspace(1.0, 2.0, d)
    v /= np.linalg.norm(v)
    for _ in range(POWER_ITERATION_MAX_STEPS):
        w = matrix @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return v
        w /= norm
        if np.linalg.norm(w - v) < POWER_ITERATION_TOLERANCE:
            return w
        v = w
    return v


def _orthogonal_fallback(previous: Matrix) -> Matrix:
    """Unit vector orthogonal to `previous`, from the least-aligned standard basis vector."""
    basis = np.eye(previous.shape[0])
    e = basis[int(np.argmin(np.abs(previous)))]
    v = e - (e @ previous) * previous
    return v / np.linalg.norm(v)


def _orient(v: Matrix) -> Matrix:
    return -v if v[int(np.argmax(np.abs(v)))] < 0.0 else v


def pca_project(features: Matrix, flags: npt.ArrayLike, labels: npt.ArrayLike | None = None) -> PcaProjection:
    """Top-2 principal axes by power iteration with deflation."""
    x = as_matrix(features)
    if x.ndim != 2 or x.shape[0] < 3:
        raise InsufficientData("PCA needs at least 3 rows")
    if x.shape[1] < 2:
        raise InsufficientData("PCA needs at least 2 feature dimensions")
    mean = x.mean(axis=0)
    centered = x - mean
    covariance = centered.T @ centered / (x.shape[0] - 1)
    total = float(np.trace(covariance))
    if total <= 0.0:
        raise DegenerateVariance("all rows are identical")

    axes: list[Matrix] = []
    variances: list[float] = []
    work = covariance.copy()
    for _ in range(2):
        v = _power_iteration(work)
        value = float(v @ work @ v)
        if value <= ZERO_VARIANCE_RATIO * total:
            v = _orthogonal_fallback(axes[0]) if axes else v
            value = 0.0
        elif axes:
            v = v - (v @ axes[0]) * axes[0]
            v /= np.linalg.norm(v)
        v = _orient(v)
        axes.append(v)
        variances.append(value)
        work = work - value * np.outer(v, v)

    stacked = np.stack(axes)
    flags = np.asarray(flags, dtype=bool)
    labels = np.zeros(x.shape[0], dtype=np.int64) if labels is None else np.asarray(labels, dtype=np.int64)
    return PcaProjection(
        axes=stacked,
        coordinates=centered @ stacked.T,
        is_poison=flags,
        labels=labels,
        explained_variance=(variances[0] / total, variances[1] / total),
        mean=mean,
    )


def _bbox_area(points: Matrix) -> float:
    extent = points.max(axis=0) - points.min(axis=0)
    return float(extent[0] * extent[1])


def bounding_box_ratio(projection: PcaProjection) -> float | None:
    """Poison bounding-box area over clean bounding-box area in the PCA plane."""
    poisons = projection.coordinates[projection.is_poison]
    clean = projection.coordinates[~projection.is_poison]
    if len(poisons) == 0 or len(clean) == 0:
        return None
    clean_area = _bbox_area(clean)
    if clean_area == 0.0:
        return None
    return _bbox_area(poisons) / clean_area


def mean_pairwise_distance(points: Matrix) -> float:
    n = len(points)
    if n < 2:
        return 0.0
    total = 0.0
    for i in range(n - 1):
        total += float(np.sum(np.linalg.norm(points[i + 1:] - points[i], axis=1)))
    return total / (n * (n - 1) / 2)


class ExperimentCoordinator:
    """Holds every stage of one experiment; each stage is computed once on first use."""

    def __init__(
            self,
            cfg: ExperimentConfig,
            *,
            dataset: Dataset | None = None,
            extractor: FeatureExtractor | None = None,
            poison_batch: PoisonBatch | None = None,
    ) -> None:
        self.cfg = cfg
        self.seeds = cfg.seeds
        if dataset is not None:
            self.__dict__["dataset"] = dataset
        if extractor is not None:
            self.__dict__["extractor"] = extractor
        if poison_batch is not None:
            self.__dict__["poison_batch"] = poison_batch

    @cached_property
    def dataset(self) -> Dataset:
        d = self.cfg.dataset
        ds = generate_synthetic(
            d.n_per_class,
            d.n_classes,
            d.input_dim,
            d.scale,
            self.seeds["geometry"],
            d.noise_level,
            name=d.name,
        )
        return split_dataset(ds, self.seeds["split"])

    @cached_property
    def aux(self) -> Dataset:
        d, a = self.cfg.dataset, self.cfg.aux
        return generate_synthetic(
            a.n_per_class,
            a.n_classes,
            d.input_dim,
            d.scale,
            self.seeds["aux-geometry"],
            a.noise_level,
            label_offset=self.dataset.n_classes,
            tag=SPLIT_AUX,
            name=f"{d.name}-aux",
        )

    @cached_property
    def extractor(self) -> FeatureExtractor:
        return pretrain_extractor(self.aux, self.cfg.extractor, self.seeds["pretrain"], self.dataset.label_set)

    @cached_property
    def poison_batch(self) -> PoisonBatch:
        return craft_poison_set(
            self.extractor, self.dataset, self.cfg.poison, self.cfg.k, self.seeds["craft"], self.cfg.workers
        )

    @cached_property
    def poisoned_dataset(self) -> Dataset:
        return self.poison_batch.inject(self.dataset)

    @cached_property
    def feature_table(self) -> FeatureTable | None:
        paths = self.cfg.dataset.features
        if paths is None:
            return None
        table = FeatureTable.load(paths["features"], paths["ids"])
        _LOGGER.info("using %d-dim precomputed features from %s", table.feature_dim, paths["features"])
        return table

    def train_features(self, ds: Dataset) -> Matrix:
        rows = ds.tagged(SPLIT_TRAIN)
        if self.feature_table is not None:
            return self.feature_table.lookup(ds.ids[rows])
        return self.extractor(ds.inputs[rows])

    @property
    def eval_set(self) -> tuple[Matrix, npt.NDArray[np.int64]]:
        """Test2 inputs and labels; table features stand in for the inputs when a table is configured."""
        rows = self.dataset.tagged(SPLIT_TEST2)
        if self.feature_table is not None:
            return self.feature_table.lookup(self.dataset.ids[rows]), self.dataset.labels[rows]
        return self.dataset.inputs[rows], self.dataset.labels[rows]

    def _run(self, ds: Dataset) -> tuple[ALState, DenseHead]:
        return al_loop(
            self.extractor,
            ds,
            Oracle.from_dataset(ds),
            self.cfg.budget,
            self.cfg.seed_set_size,
            self.cfg.retrain_every,
            self.cfg.head,
            self.seeds["active-learning"],
            warm_start=self.cfg.warm_start,
            eval_set=self.eval_set,
            feature_table=self.feature_table,
            spot_checks=self.cfg.spot_checks,
        )

    @cached_property
    def clean_run(self) -> tuple[ALState, DenseHead]:
        return self._run(self.dataset)

    @cached_property
    def poisoned_run(self) -> tuple[ALState, DenseHead]:
        return self._run(self.poisoned_dataset)

    def test_accuracy(self, f: FeatureExtractor, g: DenseHead) -> float:
        inputs, labels = self.eval_set
        labels = labels - self.dataset.label_offset
        if self.feature_table is not None:
            return float(np.mean(np.argmax(g.probabilities(inputs), axis=1) == labels))
        return accuracy(f, g, inputs, labels)

    @cached_property
    def clean_train_features(self) -> Matrix:
        rows = self.dataset.tagged(SPLIT_TRAIN)
        return self.extractor(self.dataset.inputs[rows])

    @cached_property
    def projection(self) -> PcaProjection:
        ds = self.poisoned_dataset
        rows = ds.tagged(SPLIT_TRAIN)
        return pca_project(self.train_features(ds), ds.is_poison[rows], ds.labels[rows])

    def _collision_diagnostics(self) -> tuple[float | None, float | None]:
        batch = self.poison_batch
        if len(batch) == 0:
            return None, None
        clean = self.clean_train_features
        median = float(np.median(np.linalg.norm(clean - batch.mu, axis=1)))
        tightness = float(batch.distances.max()) / median if median > 0.0 else None
        spread = None
        if len(batch) >= 2:
            rng = make_rng(self.seeds["spread-sample"])
            sample = clean[rng.choice(len(clean), size=min(len(batch), len(clean)), replace=False)]
            poison_features = self.extractor(np.stack([inst.x for inst in batch.instances]))
            reference = mean_pairwise_distance(sample)
            spread = mean_pairwise_distance(poison_features) / reference if reference > 0.0 else None
        return tightness, spread

    def report(self) -> ExperimentReport:
        clean_state, clean_head = self.clean_run
        poisoned_state, poisoned_head = self.poisoned_run
        batch = self.poison_batch
        k = len(batch)
        pool_size = len(poisoned_state.pool_ids) + poisoned_state.budget_used
        success = baseline = None
        if k > 0 and poisoned_state.budget_used > 0:
            success = poison_success_rate(poisoned_state.query_trace, k)
            baseline = random_baseline(
                pool_size, k, self.cfg.budget, self.cfg.random_trials, self.seeds["random-baseline"]
            )
        tightness, spread = self._collision_diagnostics()
        report = ExperimentReport(
            dataset_name=self.dataset.name,
            model=self.cfg.head.variant,
            accuracy_clean=self.test_accuracy(self.extractor, clean_head),
            accuracy_poisoned=self.test_accuracy(self.extractor, poisoned_head),
            loss_adv=batch.loss_adv,
            loss_initial=batch.loss_initial,
            n_poison=k,
            success_rate_poison=success,
            success_rate_random=baseline,
            craft_time_seconds=batch.mean_craft_time,
            perturbation=batch.perturbation_stats(),
            queries_on_poisons=poisoned_state.poison_queries,
            outnumber_ratio=(pool_size - k) / k if k else None,
            collision_tightness=tightness,
            poison_spread_ratio=spread,
            pca_bbox_ratio=bounding_box_ratio(self.projection) if k else None,
            config=self.cfg.document,
            seeds=self.seeds,
        )
        _LOGGER.info(
            "%s/%s: accuracy %.3f clean, %.3f poisoned; poison success %s",
            report.dataset_name,
            report.model,
            report.accuracy_clean,
            report.accuracy_poisoned,
            report.success_rate_poison,
        )
        return report

    def _finetuned_accuracy(self, ds: Dataset, state: ALState, head: DenseHead) -> float:
        inputs = ds.inputs[ds.positions(state.labeled_ids)]
        labels = np.array([state.labels[i] for i in state.labeled_ids], dtype=np.int64) - ds.label_offset
        f, g = joint_finetune(self.extractor, head, inputs, labels, self.cfg.finetune, self.seeds["finetune"])
        return self.test_accuracy(f, g)

    def defense(self) -> tuple[ExperimentReport, ExperimentReport]:
        if self.feature_table is not None:
            raise ConfigError("fine-tuning needs raw inputs, not precomputed features", key="dataset.features")
        frozen = self.report()
        clean_state, clean_head = self.clean_run
        poisoned_state, poisoned_head = self.poisoned_run
        unfrozen = replace(
            frozen,
            accuracy_clean=self._finetuned_accuracy(self.dataset, clean_state, clean_head),
            accuracy_poisoned=self._finetuned_accuracy(self.poisoned_dataset, poisoned_state, poisoned_head),
            extractor_mode="unfrozen",
        )
        _LOGGER.info(
            "defense: poisoned accuracy %.3f frozen, %.3f unfrozen",
            frozen.accuracy_poisoned,
            unfrozen.accuracy_poisoned,
        )
        return frozen, unfrozen

    def write_artifacts(self, directory: Path, include_defense: bool | None = None) -> ExperimentReport:
        """Write every stage's artifacts plus the report into `directory`."""
        directory = Path(directory)
        save_dataset(self.dataset, directory / DATASET_DIR)
        save_dataset(self.aux, directory / AUX_DIR)
        save_extractor(self.extractor, directory / EXTRACTOR_DIR)
        save_poison_batch(self.poison_batch, directory / POISON_DIR)
        report = self.report()
        write_report(report, directory)
        clean_state, _ = self.clean_run
        poisoned_state, _ = self.poisoned_run
        write_trace_csv(clean_state.query_trace, directory / TRACE_CLEAN_FILE)
        write_trace_csv(poisoned_state.query_trace, directory / TRACE_POISONED_FILE)
        write_curve_csv(clean_state.accuracy_curve, directory / CURVE_CLEAN_FILE)
        write_curve_csv(poisoned_state.accuracy_curve, directory / CURVE_POISONED_FILE)
        write_pca_csv(self.projection, directory / PCA_FILE)
        if self.cfg.defense if include_defense is None else include_defense:
            write_defense(self.defense(), directory / DEFENSE_FILE)
        return report


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    return ExperimentCoordinator(cfg).report()


def run_defense(
        cfg: ExperimentConfig, coordinator: ExperimentCoordinator | None = None
) -> tuple[ExperimentReport, ExperimentReport]:
    """(frozen, unfrozen) reports; reuses the coordinator's poisoned run when given."""
    return (coordinator or ExperimentCoordinator(cfg)).defense()


def write_report(report: ExperimentReport, directory: Path) -> None:
    write_text_atomic(directory / REPORT_FILE, report.to_json())
    with open(directory / REPORT_ROW_FILE, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(TABLE_COLUMNS)
        writer.writerow(report.table_row())


def write_defense(reports: tuple[ExperimentReport, ExperimentReport], path: Path) -> None:
    frozen, unfrozen = reports
    write_text_atomic(path, canonical_json({"frozen": frozen.to_dict(), "unfrozen": unfrozen.to_dict()}))


def write_pca_csv(projection: PcaProjection, path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(PCA_COLUMNS)
        for (pc1, pc2), flag, label in zip(projection.coordinates, projection.is_poison, projection.labels):
            writer.writerow([repr(float(pc1)), repr(float(pc2)), int(flag), int(label)])


def read_report(path: str | Path) -> ExperimentReport:
    try:
        document = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise DataError(f"cannot read report {path}: {err}") from err
    return ExperimentReport.from_dict(document, source=str(path))
