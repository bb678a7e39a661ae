"""
Run configuration loading.

A run is described by one TOML file validated into `RunConfig`. Dotted
`--set key=value` overrides are applied to the parsed document before
validation, so an override is checked exactly like a value in the file.

Validation errors name the offending key and, when the key appears in the
file, the line it is defined on.
"""

import logging
import re
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any

from pydantic import ValidationError

from rads.errors import ConfigError
from rads.models.schemas import RunConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = "configs/default.toml"

_TOML_LINE = re.compile(r"at line (\d+)")
_TABLE = re.compile(r"^\s*\[\[?\s*([^\]]+?)\s*\]\]?\s*(#.*)?$")
_KEY = re.compile(r"^\s*([A-Za-z0-9_.\"-]+)\s*=")


def parse_override(item: str) -> tuple[list[str], Any]:
    """`a.b.c=value` -> (["a", "b", "c"], value); values parse as TOML literals."""
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not of the form key=value")
    key, raw = item.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"override '{item}' has an empty key")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return path, value


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    for item in overrides:
        path, value = parse_override(item)
        node = doc
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"override '{item}': '{part}' is not a table")
            node = child
        node[path[-1]] = value
        logger.debug("Override %s = %r", ".".join(path), value)
    return doc


def _split_key(raw: str) -> list[str]:
    return [p for p in raw.replace('"', "").replace(" ", "").split(".") if p]


def locate_key(text: str, loc: tuple) -> int | None:
    """1-based line defining `loc`, a pydantic error location.

    Integer parts of `loc` select the n-th `[[array]]` block of that table.
    Falls back to the deepest enclosing table or key when the exact key is
    absent from the file.
    """
    wanted = tuple(loc)
    best_line, best_len = None, 0
    table: tuple = ()
    seen: dict[tuple, int] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        m = _TABLE.match(line)
        if m:
            parts = tuple(_split_key(m.group(1)))
            if line.lstrip().startswith("[["):
                seen[parts] = seen.get(parts, -1) + 1
                table = parts + (seen[parts],)
            else:
                table = parts
            path = table
        else:
            m = _KEY.match(line)
            if not m:
                continue
            path = table + tuple(_split_key(m.group(1)))
        if path == wanted:
            return n
        if len(path) > best_len and wanted[: len(path)] == path:
            best_line, best_len = n, len(path)
    return best_line


def validate_config(doc: dict, text: str = "", source: str = "<config>") -> RunConfig:
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        errors = exc.errors()
        first = errors[0]
        dotted = ".".join(str(p) for p in first["loc"]) or "<root>"
        raise ConfigError(
            f"{source}: {dotted}: {first['msg']}",
            detail=[{"loc": list(e["loc"]), "msg": e["msg"]} for e in errors],
            line=locate_key(text, first["loc"]) if text else None,
        ) from exc


def load_config(path: str | Path, overrides: list[str] | None = None) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = _TOML_LINE.search(str(exc))
        raise ConfigError(f"{path}: invalid TOML: {exc}", line=int(m.group(1)) if m else None) from exc
    apply_overrides(doc, overrides or [])
    cfg = validate_config(doc, text, str(path))
    logger.info("Loaded config %s (schema v%d)", path, cfg.schema_version)
    return cfg
