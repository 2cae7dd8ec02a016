"""Feature-collision poisons: drive f(x + δ) onto a fixed collision vector μ."""
import json
import time
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from logging import getLogger
from pathlib import Path
from typing import Any

import numpy as np

from .const import (
    LR_FLOOR,
    MANIFEST_FILE,
    MODALITY_PRESETS,
    MU_KINDS,
    MU_MEAN,
    MU_ONE,
    MU_ZERO,
    NORM_EXACT,
    NORM_MODES,
    NORM_SQUARED,
    SPLIT_TEST1,
    SPLIT_TRAIN,
)
from .datasets import Dataset, Instance
from .exceptions import ConfigError, DataError, InvalidNumericState, ShapeMismatch
from .models import FeatureExtractor
from .numerics import Matrix, as_matrix, ensure_finite
from .tensor_io import load_tensor, save_tensor
from .util import canonical_json, derive_seed, write_text_atomic

_LOGGER = getLogger(__name__)


@dataclass(frozen=True)
class PoisonConfig:
    """Crafting hyperparameters; `beta` and `max_iters` fall back to the modality preset.

    `lr` is a step size in normalized-input units: the raw step is
    ``lr * scale**2 * grad``.
    """

    mu_kind: str = MU_ZERO
    mu: tuple[float, ...] | None = None
    beta: float | None = None
    max_iters: int | None = None
    lr: float = 0.01
    lr_adapt: bool = True
    lr_growth: float = 1.2
    early_stop_tol: float = 1e-8
    clip_to_scale: bool = True
    norm_mode: str = NORM_SQUARED
    modality: str = "image"
    balance_classes: bool = True

    def __post_init__(self) -> None:
        if self.mu_kind not in MU_KINDS:
            raise ConfigError(f"unknown collision vector kind {self.mu_kind!r}", key="poison.mu_kind")
        if self.norm_mode not in NORM_MODES:
            raise ConfigError(f"unknown norm mode {self.norm_mode!r}", key="poison.norm_mode")
        if self.modality not in MODALITY_PRESETS:
            raise ConfigError(f"unknown modality {self.modality!r}", key="poison.modality")
        if self.resolved_beta < 0:
            raise ConfigError("beta must be non-negative", key="poison.beta")
        if self.resolved_max_iters < 1:
            raise ConfigError("max_iters must be at least 1", key="poison.max_iters")
        if self.lr <= 0 or self.lr_growth < 1.0:
            raise ConfigError("lr must be positive and lr_growth at least 1", key="poison.lr")

    @property
    def resolved_beta(self) -> float:
        if self.beta is not None:
            return float(self.beta)
        preset = MODALITY_PRESETS[self.modality]
        return float(preset["beta_exact" if self.norm_mode == NORM_EXACT else "beta_squared"])

    @property
    def resolved_max_iters(self) -> int:
        if self.max_iters is not None:
            return int(self.max_iters)
        return int(MODALITY_PRESETS[self.modality]["max_iters"])

    def with_mu(self, mu: Matrix) -> "PoisonConfig":
        return replace(self, mu=tuple(float(v) for v in mu))

    def collision_vector(self, feature_dim: int) -> Matrix:
        if self.mu is not None:
            mu = as_matrix(self.mu)
            if mu.shape != (feature_dim,):
                raise ShapeMismatch(f"μ has length {mu.shape[0]}, features have {feature_dim}")
            return mu
        if self.mu_kind == MU_ZERO:
            return np.zeros(feature_dim)
        if self.mu_kind == MU_ONE:
            return np.ones(feature_dim)
        raise ConfigError("the mean collision vector must be resolved from clean features", key="poison.mu_kind")

    def as_dict(self) -> dict[str, Any]:
        document = asdict(self)
        document["mu"] = None if self.mu is None else list(self.mu)
        document["resolved_beta"] = self.resolved_beta
        document["resolved_max_iters"] = self.resolved_max_iters
        return document


def resolve_collision_vector(
        cfg: PoisonConfig, f: FeatureExtractor, clean_inputs: Matrix | None = None
) -> PoisonConfig:
    """Pin μ to a concrete vector; the `mean` kind averages clean features."""
    if cfg.mu is not None:
        return cfg
    if cfg.mu_kind == MU_MEAN:
        if clean_inputs is None or len(clean_inputs) == 0:
            raise DataError("the mean collision vector needs clean inputs")
        return cfg.with_mu(np.mean(f(clean_inputs), axis=0))
    return cfg.with_mu(cfg.collision_vector(f.feature_dim))


def collision_objective(
        f: FeatureExtractor,
        x: Matrix,
        delta: Matrix,
        mu: Matrix,
        beta: float,
        norm_mode: str = NORM_SQUARED,
) -> tuple[float, Matrix]:
    """Collision distance plus δ regularizer, and its gradient w.r.t. δ."""
    x, delta, mu = as_matrix(x), as_matrix(delta), as_matrix(mu)
    if delta.shape != x.shape:
        raise ShapeMismatch(f"δ has shape {delta.shape}, x has {x.shape}")
    if mu.shape != (f.feature_dim,):
        raise ShapeMismatch(f"μ has length {mu.shape[0]}, features have {f.feature_dim}")
    features, cache = f.forward_cached(x + delta)
    diff = features[0] - mu
    if norm_mode == NORM_SQUARED:
        collision = float(diff @ diff)
        d_features = 2.0 * diff
        regularizer = beta * float(delta @ delta)
        d_regularizer = 2.0 * beta * delta
    else:
        distance = float(np.linalg.norm(diff))
        collision = distance
        d_features = diff / distance if distance > 0.0 else np.zeros_like(diff)
        delta_norm = float(np.linalg.norm(delta))
        regularizer = beta * delta_norm
        d_regularizer = beta * delta / delta_norm if delta_norm > 0.0 else np.zeros_like(delta)
    _, d_input = f.backward(cache, d_features[None, :])
    objective = collision + regularizer
    gradient = d_input[0] + d_regularizer
    ensure_finite(objective, "collision objective")
    ensure_finite(gradient, "collision gradient")
    return objective, gradient


@dataclass(frozen=True, eq=False)
class CraftTrace:
    objectives: list[float]
    iterations_used: int
    stop_reason: str
    final_lr: float
    seed: int

    @property
    def initial_objective(self) -> float:
        return self.objectives[0]

    @property
    def final_objective(self) -> float:
        return self.objectives[-1]


def _project(x: Matrix, delta: Matrix, scale: float) -> Matrix:
    return np.clip(x + delta, -scale, scale) - x


def craft_poison(f: FeatureExtractor, x: Matrix, cfg: PoisonConfig, seed: int) -> tuple[Matrix, CraftTrace]:
    """Gradient descent on the collision objective starting from δ = 0."""
    x = as_matrix(x)
    mu = cfg.collision_vector(f.feature_dim)
    beta = cfg.resolved_beta
    scale = f.input_scale
    step_scale = scale * scale

    def objective(delta: Matrix) -> tuple[float, Matrix]:
        return collision_objective(f, x, delta, mu, beta, cfg.norm_mode)

    delta = np.zeros_like(x)
    try:
        current, grad = objective(delta)
    except InvalidNumericState as err:
        raise InvalidNumericState(f"objective is not finite at δ = 0: {err}") from err
    objectives = [current]
    lr = cfg.lr
    iterations = 0
    reason = "max_iters"
    while iterations < cfg.resolved_max_iters:
        if not np.any(grad):
            reason = "stationary"
            break
        iterations += 1
        candidate = delta - lr * step_scale * grad
        if cfg.clip_to_scale:
            candidate = _project(x, candidate, scale)
        try:
            value, candidate_grad = objective(candidate)
        except InvalidNumericState:
            if not cfg.lr_adapt:
                raise
            value, candidate_grad = np.inf, grad
        if cfg.lr_adapt and not value < current:
            lr *= 0.5
            if lr < LR_FLOOR:
                reason = "lr_floor"
                break
            continue
        improvement = (current - value) / current if current > 0.0 else 0.0
        delta, current, grad = candidate, value, candidate_grad
        objectives.append(current)
        if cfg.lr_adapt:
            lr *= cfg.lr_growth
        if abs(improvement) < cfg.early_stop_tol:
            reason = "converged"
            break
    return delta, CraftTrace(objectives, iterations, reason, lr, int(seed))


def _distances_to(f: FeatureExtractor, inputs: Matrix, mu: Matrix) -> Matrix:
    if len(inputs) == 0:
        return np.zeros(0)
    return np.linalg.norm(f(inputs) - mu, axis=1)


def uncovered_classes(candidates: Sequence[Instance], n_classes: int) -> list[int]:
    present = {inst.label for inst in candidates}
    return [c for c in range(n_classes) if c not in present]


def select_base_instances(
        f: FeatureExtractor,
        candidates: Sequence[Instance],
        mu: Matrix,
        k: int,
        balance: bool,
        n_classes: int | None = None,
) -> list[int]:
    """Pre-screen bases by ||f(x) - μ||; optionally round-robin over classes."""
    if k > len(candidates):
        raise DataError(f"asked for {k} bases from {len(candidates)} candidates")
    if k <= 0:
        return []
    ids = np.array([inst.id for inst in candidates], dtype=np.int64)
    labels = np.array([inst.label for inst in candidates], dtype=np.int64)
    distances = _distances_to(f, np.stack([inst.x for inst in candidates]), as_matrix(mu))
    order = np.lexsort((ids, distances))
    if not balance:
        return [int(ids[i]) for i in order[:k]]

    classes = range(n_classes) if n_classes is not None else sorted(set(int(v) for v in labels))
    queues = {c: [int(ids[i]) for i in order if labels[i] == c] for c in classes}
    for c in classes:
        if not queues[c]:
            _LOGGER.warning("class %d has no base candidates; poisons will not cover it", c)
    chosen: list[int] = []
    depth = 0
    while len(chosen) < k:
        for c in classes:
            if depth < len(queues[c]) and len(chosen) < k:
                chosen.append(queues[c][depth])
        depth += 1
    return chosen


@dataclass(frozen=True, eq=False)
class PoisonRecord:
    base_id: int
    poison_id: int
    delta: Matrix
    final_collision_distance: float
    initial_objective: float
    final_objective: float
    iterations_used: int
    wall_time_seconds: float
    stop_reason: str
    linf_ratio: float
    l2_ratio: float


@dataclass(eq=False)
class PoisonBatch:
    records: list[PoisonRecord]
    instances: list[Instance]
    config: PoisonConfig
    mu: Matrix
    seed: int
    uncovered_classes: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def base_ids(self) -> list[int]:
        return [r.base_id for r in self.records]

    @property
    def poison_ids(self) -> list[int]:
        return [r.poison_id for r in self.records]

    @property
    def deltas(self) -> Matrix:
        if not self.records:
            return np.zeros((0, 0))
        return np.stack([r.delta for r in self.records])

    @property
    def distances(self) -> Matrix:
        return np.array([r.final_collision_distance for r in self.records])

    @property
    def loss_adv(self) -> float:
        return float(sum(r.final_objective for r in self.records))

    @property
    def loss_initial(self) -> float:
        return float(sum(r.initial_objective for r in self.records))

    @property
    def mean_craft_time(self) -> float:
        if not self.records:
            return 0.0
        return float(np.mean([r.wall_time_seconds for r in self.records]))

    def perturbation_stats(self) -> dict[str, float]:
        if not self.records:
            return {"mean_linf_ratio": 0.0, "max_linf_ratio": 0.0, "mean_l2_ratio": 0.0, "max_l2_ratio": 0.0}
        linf = np.array([r.linf_ratio for r in self.records])
        l2 = np.array([r.l2_ratio for r in self.records])
        return {
            "mean_linf_ratio": float(linf.mean()),
            "max_linf_ratio": float(linf.max()),
            "mean_l2_ratio": float(l2.mean()),
            "max_l2_ratio": float(l2.max()),
        }

    def inject(self, ds: Dataset) -> Dataset:
        """The dataset with every poison registered in the training split."""
        return ds.with_instances(self.instances, tag=SPLIT_TRAIN)


def _poison_instance(base: Instance, delta: Matrix, poison_id: int, clip: bool) -> Instance:
    x = base.x + delta
    if clip:
        x = np.clip(x, -base.scale, base.scale)
    return Instance(x=x, scale=base.scale, label=base.label, id=poison_id, is_poison=True, base_id=base.id)


def _record(
        f: FeatureExtractor,
        base: Instance,
        poison: Instance,
        delta: Matrix,
        mu: Matrix,
        trace: CraftTrace,
        wall: float,
) -> PoisonRecord:
    x_norm = float(np.linalg.norm(base.x))
    return PoisonRecord(
        base_id=base.id,
        poison_id=poison.id,
        delta=delta,
        final_collision_distance=float(np.linalg.norm(f(poison.x) - mu)),
        initial_objective=trace.initial_objective,
        final_objective=trace.final_objective,
        iterations_used=trace.iterations_used,
        wall_time_seconds=wall,
        stop_reason=trace.stop_reason,
        linf_ratio=float(np.max(np.abs(delta))) / base.scale if delta.size else 0.0,
        l2_ratio=float(np.linalg.norm(delta)) / x_norm if x_norm > 0.0 else 0.0,
    )


def craft_poison_set(
        f: FeatureExtractor,
        ds: Dataset,
        cfg: PoisonConfig,
        k: int,
        seed: int,
        workers: int = 1,
) -> PoisonBatch:
    """Select k test1 bases and craft one poison per base.

    Each base gets its own seed derived from (seed, base_id), so any number
    of workers yields the same batch.
    """
    if cfg.mu is None:
        clean_train = [pos for pos in ds.tagged(SPLIT_TRAIN) if not ds.is_poison[pos]]
        cfg = resolve_collision_vector(cfg, f, ds.inputs[clean_train] if clean_train else None)
    mu = cfg.collision_vector(f.feature_dim)
    candidates = [ds.instance_at(pos) for pos in ds.tagged(SPLIT_TEST1) if not ds.is_poison[pos]]
    missing = uncovered_classes(candidates, ds.n_classes) if cfg.balance_classes else []
    base_ids = select_base_instances(f, candidates, mu, k, cfg.balance_classes, ds.n_classes)
    first_id = ds.next_id

    def craft_one(item: tuple[int, int]) -> PoisonRecord:
        offset, base_id = item
        base = ds.instance(base_id)
        started = time.perf_counter()
        delta, trace = craft_poison(f, base.x, cfg, derive_seed(seed, "poison", base_id))
        wall = time.perf_counter() - started
        poison = _poison_instance(base, delta, first_id + offset, cfg.clip_to_scale)
        return _record(f, base, poison, delta, mu, trace, wall)

    items = list(enumerate(base_ids))
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(craft_one, items))
    else:
        records = [craft_one(item) for item in items]
    instances = [
        _poison_instance(ds.instance(r.base_id), r.delta, r.poison_id, cfg.clip_to_scale) for r in records
    ]
    if records:
        _LOGGER.info(
            "crafted %d poisons: max collision distance %.3e, summed objective %.4g -> %.4g",
            len(records),
            max(r.final_collision_distance for r in records),
            sum(r.initial_objective for r in records),
            sum(r.final_objective for r in records),
        )
    return PoisonBatch(records, instances, cfg, mu, int(seed), missing)


def save_poison_batch(batch: PoisonBatch, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_tensor(directory / "deltas.atf", batch.deltas)
    save_tensor(directory / "base_ids.atf", np.array(batch.base_ids, dtype=np.uint32))
    save_tensor(directory / "poison_ids.atf", np.array(batch.poison_ids, dtype=np.uint32))
    save_tensor(directory / "distances.atf", batch.distances)
    save_tensor(
        directory / "objectives.atf",
        np.array([[r.initial_objective, r.final_objective] for r in batch.records]).reshape(-1, 2),
    )
    save_tensor(directory / "mu.atf", batch.mu)
    manifest = {
        "kind": "poisons",
        "config": batch.config.as_dict(),
        "seed": batch.seed,
        "uncovered_classes": batch.uncovered_classes,
        "iterations_used": [r.iterations_used for r in batch.records],
        "stop_reasons": [r.stop_reason for r in batch.records],
        "wall_time_seconds": [r.wall_time_seconds for r in batch.records],
    }
    write_text_atomic(directory / MANIFEST_FILE, canonical_json(manifest))


def load_poison_batch(directory: str | Path, ds: Dataset, f: FeatureExtractor) -> PoisonBatch:
    """Rebuild a batch against the dataset holding its base instances."""
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_FILE).read_text(encoding="utf-8"))
    config_doc = {
        key: value for key, value in manifest["config"].items() if key not in ("resolved_beta", "resolved_max_iters")
    }
    if config_doc.get("mu") is not None:
        config_doc["mu"] = tuple(config_doc["mu"])
    cfg = PoisonConfig(**config_doc)
    deltas = load_tensor(directory / "deltas.atf").astype(np.float64)
    base_ids = load_tensor(directory / "base_ids.atf").astype(np.int64)
    poison_ids = load_tensor(directory / "poison_ids.atf").astype(np.int64)
    objectives = load_tensor(directory / "objectives.atf").astype(np.float64)
    mu = load_tensor(directory / "mu.atf").astype(np.float64)
    records = []
    instances = []
    for i, (base_id, poison_id) in enumerate(zip(base_ids, poison_ids)):
        base = ds.instance(int(base_id))
        poison = _poison_instance(base, deltas[i], int(poison_id), cfg.clip_to_scale)
        trace = CraftTrace(
            objectives=[float(objectives[i, 0]), float(objectives[i, 1])],
            iterations_used=int(manifest["iterations_used"][i]),
            stop_reason=manifest["stop_reasons"][i],
            final_lr=0.0,
            seed=int(manifest["seed"]),
        )
        records.append(_record(f, base, poison, deltas[i], mu, trace, float(manifest["wall_time_seconds"][i])))
        instances.append(poison)
    return PoisonBatch(records, instances, cfg, mu, int(manifest["seed"]), list(manifest["uncovered_classes"]))
