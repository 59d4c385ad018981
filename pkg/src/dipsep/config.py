"""Layered JSON configuration: preset defaults < config file < CLI overrides."""
from __future__ import annotations

import difflib
import json
from pathlib import Path
from typing import Iterable, Mapping, Optional

from .errors import ConfigError


def flatten(d: Mapping, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping) and v:
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def unflatten(flat: Mapping) -> dict:
    out: dict = {}
    for key, v in flat.items():
        node = out
        *parents, leaf = key.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = v
    return out


def resolve_key(key: str, valid: Iterable[str]) -> str:
    """Map a full dotted key or an unambiguous leaf name onto a valid key."""
    valid = list(valid)
    norm = key.replace("-", "_")
    if norm in valid:
        return norm
    hits = [v for v in valid if v.endswith("." + norm)]
    if len(hits) == 1:
        return hits[0]
    if len(hits) > 1:
        raise ConfigError(f"config key {key!r} is ambiguous; use one of {sorted(hits)}")
    leaves = {v.rsplit(".", 1)[-1]: v for v in valid}
    close = difflib.get_close_matches(norm, list(valid) + list(leaves), n=1, cutoff=0.5)
    hint = f"; did you mean {close[0]!r}?" if close else ""
    raise ConfigError(f"unknown config key {key!r}{hint}")


def parse_value(text: str):
    """Decode an override value as JSON when possible, else keep the string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_overrides(items: Optional[Iterable[str]]) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = parse_value(v.strip())
    return out


def read_config_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def load_config(path, overrides: Optional[Mapping] = None, defaults: Optional[Mapping] = None) -> dict:
    """Merge ``defaults``, the JSON file at ``path`` (may be None) and
    ``overrides`` (dotted or leaf keys). Unknown keys are rejected with the
    nearest valid key as a suggestion."""
    merged = flatten(defaults or {})
    if path is not None:
        for k, v in flatten(read_config_file(path)).items():
            merged[resolve_key(k, merged)] = v
    for k, v in (overrides or {}).items():
        merged[resolve_key(k, merged)] = v
    return unflatten(merged)


def dumps(cfg: Mapping) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
