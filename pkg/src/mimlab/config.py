"""JSON run configs with dotted ``key=value`` overrides."""

from __future__ import annotations

import json
from pathlib import Path

from .training import Mode, TrainConfig


def parse_value(text: str):
    """JSON literal if it parses (numbers, booleans, null, lists), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(base: dict, overrides) -> dict:
    """Return a copy of ``base`` with each ``a.b.c=value`` applied; unknown keys are rejected."""
    out = json.loads(json.dumps(base))
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not of the form key=value")
        path = key.strip().split(".")
        node = out
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                raise ValueError(f"unknown config section {part!r} in {key!r}")
            node = node[part]
        if path[-1] not in node:
            raise ValueError(f"unknown config key {key!r}")
        node[path[-1]] = parse_value(raw)
    return out


def resolve_config(path=None, overrides=(), seed: int | None = None, mode: str | None = None) -> TrainConfig:
    """Defaults for the mode, then the JSON file, then ``--set`` overrides, then the seed."""
    loaded = json.loads(Path(path).read_text()) if path else {}
    from_set = [o.partition("=")[2].strip() for o in overrides or () if o.partition("=")[0].strip() == "mode"]
    mode = mode or (from_set[-1] if from_set else loaded.get("mode", Mode.MAE.value))
    base = TrainConfig.for_mode(mode).to_dict()
    merged = _deep_merge(base, loaded)
    merged = apply_overrides(merged, overrides)
    if seed is not None:
        merged["seed"] = int(seed)
    cfg = TrainConfig.from_dict(merged)
    cfg.validate()
    return cfg


def _deep_merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        if k not in base:
            raise ValueError(f"unknown config key {k!r}")
        out[k] = _deep_merge(base[k], v) if isinstance(v, dict) and isinstance(base[k], dict) else v
    return out


def dump_config(config: TrainConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True)
