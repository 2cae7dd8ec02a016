"""Command-line entry point.

Subcommands share ``--config``, ``--set``, ``--out``, ``--seed``,
``--workers`` and ``-v``. Artifacts are staged and only published when the
subcommand succeeds. Exit statuses: 0 ok, 1 unexpected failure, 2 config,
3 numeric, 4 data, 5 tensor file.
"""
import argparse
import csv
import io
import json
import logging
import sys
from collections.abc import Callable, Sequence
from logging import getLogger
from pathlib import Path
from typing import Any

import numpy as np

from .attack import load_poison_batch, save_poison_batch
from .config import resolve_config
from .const import (
    AUX_DIR,
    BASELINE_FILE,
    CONFIG_ECHO_FILE,
    DATASET_DIR,
    DEFENSE_FILE,
    DOMAIN,
    EXIT_FAILURE,
    EXIT_OK,
    EXTRACTOR_DIR,
    MANIFEST_FILE,
    PCA_FILE,
    POISON_DIR,
    REPORT_FILE,
    SPLIT_TRAIN,
    STAGE_DEPENDENCIES,
    STAGE_RECORD_KEY,
    SUBCOMMANDS,
    TABLE_COLUMNS,
    TABLE_FILE,
)
from .datasets import load_dataset, save_dataset
from .exceptions import ConfigError, DataError, LabError
from .harness import (
    ExperimentConfig,
    ExperimentCoordinator,
    random_baseline_stats,
    read_report,
    write_defense,
    write_pca_csv,
    write_report,
)
from .models import load_extractor, save_extractor
from .util import canonical_json, safely_get_json_value, staged_output, write_text_atomic

_LOGGER = getLogger(__name__)


class _ArgumentParser(argparse.ArgumentParser):
    """Raises instead of exiting so usage errors map onto the config exit status."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog=DOMAIN, description="Feature-collision poisoning lab for active learning.")
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", type=Path, default=None, help="JSON configuration file")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE", help="dotted-path override"
    )
    parser.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="master seed")
    parser.add_argument("--workers", type=int, default=None, help="crafting parallelism")
    parser.add_argument("--reports", type=Path, nargs="*", default=[], help="report files for `report`")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def stage_record(document: dict[str, Any], stage: str) -> dict[str, Any]:
    """The configuration values a stage directory depends on, as they round-trip through JSON."""
    record = {key: safely_get_json_value(document, key) for key in STAGE_DEPENDENCIES[stage]}
    return json.loads(canonical_json(record))


def _first_difference(expected: Any, recorded: Any, key: str) -> str | None:
    if isinstance(expected, dict) and isinstance(recorded, dict):
        for name in sorted(set(expected) | set(recorded)):
            found = _first_difference(expected.get(name), recorded.get(name), f"{key}.{name}")
            if found is not None:
                return found
        return None
    return None if expected == recorded else key


def _reusable(out_dir: Path, stage: str, document: dict[str, Any]) -> bool:
    path = out_dir / stage / MANIFEST_FILE
    if not path.exists():
        return False
    try:
        recorded = json.loads(path.read_text(encoding="utf-8")).get(STAGE_RECORD_KEY)
    except (OSError, json.JSONDecodeError) as err:
        raise DataError(f"cannot read {path}: {err}") from err
    if not isinstance(recorded, dict):
        _LOGGER.warning("rebuilding %s: %s does not record its configuration", stage, path)
        return False
    for key, value in stage_record(document, stage).items():
        changed = _first_difference(value, recorded.get(key), key)
        if changed is not None:
            _LOGGER.warning("rebuilding %s: %s changed since it was built", stage, changed)
            return False
    return True


def _record_stages(staging: Path, document: dict[str, Any]) -> None:
    for stage in STAGE_DEPENDENCIES:
        path = staging / stage / MANIFEST_FILE
        if path.exists():
            manifest = json.loads(path.read_text(encoding="utf-8"))
            manifest[STAGE_RECORD_KEY] = stage_record(document, stage)
            write_text_atomic(path, canonical_json(manifest))


def _coordinator(cfg: ExperimentConfig, out_dir: Path) -> ExperimentCoordinator:
    """A coordinator primed with the stages in `out_dir` that were built from the same configuration."""
    dataset = extractor = None
    document = cfg.document
    if _reusable(out_dir, DATASET_DIR, document):
        dataset = load_dataset(out_dir / DATASET_DIR)
        _LOGGER.info("reusing dataset from %s", out_dir / DATASET_DIR)
    if _reusable(out_dir, EXTRACTOR_DIR, document):
        extractor = load_extractor(out_dir / EXTRACTOR_DIR)
        _LOGGER.info("reusing extractor from %s", out_dir / EXTRACTOR_DIR)
    coordinator = ExperimentCoordinator(cfg, dataset=dataset, extractor=extractor)
    if _reusable(out_dir, POISON_DIR, document):
        batch = load_poison_batch(out_dir / POISON_DIR, coordinator.dataset, coordinator.extractor)
        _LOGGER.info("reusing %d poisons from %s", len(batch), out_dir / POISON_DIR)
        coordinator = ExperimentCoordinator(
            cfg, dataset=coordinator.dataset, extractor=coordinator.extractor, poison_batch=batch
        )
    return coordinator


def _gen_data(coordinator: ExperimentCoordinator, staging: Path, args: argparse.Namespace) -> None:
    save_dataset(coordinator.dataset, staging / DATASET_DIR)
    save_dataset(coordinator.aux, staging / AUX_DIR)


def _pretrain(coordinator: ExperimentCoordinator, staging: Path, args: argparse.Namespace) -> None:
    save_extractor(coordinator.extractor, staging / EXTRACTOR_DIR)


def _craft(coordinator: ExperimentCoordinator, staging: Path, args: argparse.Namespace) -> None:
    save_poison_batch(coordinator.poison_batch, staging / POISON_DIR)


def _run(coordinator: ExperimentCoordinator, staging: Path, args: argparse.Namespace) -> None:
    coordinator.write_artifacts(staging)


def _defend(coordinator: ExperimentCoordinator, staging: Path, args: argparse.Namespace) -> None:
    reports = coordinator.defense()
    write_report(reports[0], staging)
    write_defense(reports, staging / DEFENSE_FILE)


def _baseline(coordinator: ExperimentCoordinator, staging: Path, args: argparse.Namespace) -> None:
    cfg = coordinator.cfg
    train_rows = coordinator.dataset.tagged(SPLIT_TRAIN)
    clean_pool = int(np.sum(~coordinator.dataset.is_poison[train_rows])) - cfg.seed_set_size
    pool_size = clean_pool + cfg.k
    mean, stderr = random_baseline_stats(
        pool_size, cfg.k, cfg.budget, cfg.random_trials, coordinator.seeds["random-baseline"]
    )
    document = {
        "pool_size": pool_size,
        "k": cfg.k,
        "budget": cfg.budget,
        "trials": cfg.random_trials,
        "estimate": mean,
        "stderr": stderr,
        "expectation": cfg.budget / pool_size,
    }
    write_text_atomic(staging / BASELINE_FILE, canonical_json(document))


def _pca(coordinator: ExperimentCoordinator, staging: Path, args: argparse.Namespace) -> None:
    write_pca_csv(coordinator.projection, staging / PCA_FILE)


def aggregate_reports(paths: Sequence[str | Path]) -> str:
    """Table-shaped CSV with one row per report, sorted by (dataset, model)."""
    if not paths:
        raise DataError("at least one report is required")
    reports = sorted((read_report(path) for path in paths), key=lambda r: (r.dataset_name, r.model))
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(TABLE_COLUMNS)
    for report in reports:
        writer.writerow(report.table_row())
    return buffer.getvalue()


def _report(args: argparse.Namespace, staging: Path) -> None:
    paths = args.reports or sorted(args.out.glob(f"*/{REPORT_FILE}"))
    write_text_atomic(staging / TABLE_FILE, aggregate_reports(paths))


COMMANDS: dict[str, Callable[[ExperimentCoordinator, Path, argparse.Namespace], None]] = {
    "gen-data": _gen_data,
    "pretrain": _pretrain,
    "craft": _craft,
    "run": _run,
    "defend": _defend,
    "baseline": _baseline,
    "pca": _pca,
}


def format_error(err: BaseException) -> str:
    if isinstance(err, LabError):
        code, key = err.exit_code, err.key or "-"
    else:
        code, key = EXIT_FAILURE, "-"
    return f"error exit={code} kind={type(err).__name__} key={key} message={json.dumps(str(err))}"


def dispatch(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand; returns the process exit status."""
    try:
        args = build_parser().parse_args(argv)
        _configure_logging(args.verbose)
        document = resolve_config(args.config, args.overrides, args.seed, args.workers)
        with staged_output(args.out) as staging:
            write_text_atomic(staging / CONFIG_ECHO_FILE, canonical_json(document))
            if args.subcommand == "report":
                _report(args, staging)
            else:
                cfg = ExperimentConfig.from_dict(document)
                COMMANDS[args.subcommand](_coordinator(cfg, args.out), staging, args)
                _record_stages(staging, document)
    except LabError as err:
        print(format_error(err), file=sys.stderr)
        return err.exit_code
    except Exception as err:  # noqa: BLE001
        _LOGGER.debug("unexpected failure", exc_info=True)
        print(format_error(err), file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())

