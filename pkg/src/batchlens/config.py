"""Flat key=value run configuration: file parsing, flag merging, resolution.

One `key = value` pair per line, `#` starts a comment. Unknown keys are
errors (typo safety). Command-line flags override file values. Every run
writes `<run-name>.config.resolved` with the exact merged configuration;
re-running from that file reproduces the run bit-for-bit in deterministic
mode.
"""

import os
from dataclasses import dataclass, fields

from .data import PLAN_KINDS
from .experiments import ExperimentConfig


@dataclass
class RunConfig(ExperimentConfig):
    run_name: str = "run"
    data_dir: str = ""
    out_dir: str = "."
    checkpoint: str = ""


def _parse_bool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_PARSERS = {bool: _parse_bool, int: int, float: float, str: lambda s: str(s).strip()}


def _field_types():
    return {f.name: f.type for f in fields(RunConfig)}


def parse_config_file(path):
    """Read a flat key=value file into a dict of raw strings."""
    pairs = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path}:{lineno}: expected key = value, got {line!r}")
            key, _, value = stripped.partition("=")
            pairs[key.strip()] = value.strip()
    return pairs


def resolve_config(file_pairs, overrides=None, base_dir="."):
    """Merge file pairs with overrides into a validated RunConfig."""
    types = _field_types()
    merged = dict(file_pairs)
    merged.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(merged) - set(types))
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    cfg = RunConfig()
    for key, raw in merged.items():
        ftype = types[key]
        if isinstance(ftype, str):  # dataclass stores annotations as strings
            ftype = {"bool": bool, "int": int, "float": float, "str": str}[ftype]
        setattr(cfg, key, _PARSERS[ftype](raw))
    _validate(cfg)
    if not cfg.data_dir:
        cfg.data_dir = os.environ.get("BATCHLENS_DATA_DIR", "")
    for key in ("data_dir", "out_dir", "checkpoint"):
        value = getattr(cfg, key)
        if value:
            setattr(cfg, key, os.path.abspath(os.path.join(base_dir, value)))
    return cfg


def _validate(cfg):
    if cfg.train_plan not in PLAN_KINDS:
        raise ValueError(f"train_plan must be one of {PLAN_KINDS}, got {cfg.train_plan!r}")
    cfg.protocols()  # raises on unknown protocol names
    if cfg.dataset not in ("synthetic", "cifar10"):
        raise ValueError(f"dataset must be synthetic or cifar10, got {cfg.dataset!r}")
    if cfg.mode not in ("deterministic", "fast"):
        raise ValueError(f"mode must be deterministic or fast, got {cfg.mode!r}")
    if cfg.stats not in ("ema", "fullpass"):
        raise ValueError(f"stats must be ema or fullpass, got {cfg.stats!r}")
    if cfg.epochs < 1 or cfg.eval_every < 1:
        raise ValueError("epochs and eval_every must be >= 1")
    if not 0.0 < cfg.theta <= 1.0:
        raise ValueError("theta must lie in (0, 1]")


def write_resolved(cfg, path):
    """Serialize every field, sorted by key, one pair per line."""
    lines = []
    for f in sorted(fields(RunConfig), key=lambda f: f.name):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{f.name} = {value}")
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
