import hashlib
import json
import os
import shutil
from collections.abc import Callable, Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Any


def safely_get_json_value(document: Any, key: str, callable_to_cast: Callable[[Any], Any] | None = None) -> Any:
    """Value at dotted `key` inside nested dicts and lists; None as soon as a step is missing."""
    value = document
    for x in key.split("."):
        if value is not None:
            try:
                value = value[x]
            except (TypeError, KeyError):
                try:
                    value = value[int(x)]
                except (TypeError, KeyError, ValueError, IndexError):
                    value = None
    if callable_to_cast is not None and value is not None:
        if callable_to_cast is bool and type(value) is str and value.isdigit():
            value = int(value)
        value = callable_to_cast(value)
    return value


def parse_override(override: str) -> tuple[str, Any]:
    """Split `dotted.key=value`; the value is decoded as JSON when it parses."""
    if "=" not in override:
        raise ValueError(f"override {override!r} is not of the form key=value")
    key, raw = override.split("=", 1)
    key = key.strip()
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def deep_merge(base: dict, update: dict) -> dict:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def derive_seed(master: int, *purpose: object) -> int:
    """Mix a master seed with purpose strings into an independent 64-bit seed."""
    material = ":".join([str(int(master)), *(str(p) for p in purpose)])
    digest = hashlib.sha256(material.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def canonical_json(document: Any) -> str:
    return json.dumps(document, sort_keys=True, indent=2, allow_nan=False)


def write_text_atomic(path: Path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


@contextmanager
def staged_output(out_dir: Path) -> Iterator[Path]:
    """Collect artifacts in a staging directory and publish them only on success."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    staging = out_dir / f".staging-{os.getpid()}"
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir()
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    for entry in sorted(staging.iterdir()):
        destination = out_dir / entry.name
        if destination.is_dir():
            shutil.rmtree(destination)
        os.replace(entry, destination)
    staging.rmdir()
