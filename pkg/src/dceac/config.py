"""Run configuration: built-in defaults < key=value config file < command-line flags."""

from __future__ import annotations

import dataclasses
import logging
import os

from dceac.network import ArchitectureConfig
from dceac.training import TrainConfig

log = logging.getLogger(__name__)

IO_KEYS = ("images", "masks", "manifest", "ckpt", "out", "log", "pred", "patch")


def default_seed():
    raw = os.environ.get("DCL_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ValueError(f"DCL_SEED must be an integer, got {raw!r}") from None


def _fields(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


ARCH_FIELDS = _fields(ArchitectureConfig)
TRAIN_FIELDS = _fields(TrainConfig)


def defaults():
    d = {}
    d.update(ArchitectureConfig().to_dict())
    d.update(dataclasses.asdict(TrainConfig(seed=default_seed())))
    for k in IO_KEYS:
        d[k] = None
    return d


def _coerce(key, text):
    ref = defaults()[key]
    text = text.strip()
    if key == "stop_tol":
        return None if text.lower() in ("", "none", "off") else float(text)
    if key in IO_KEYS:
        return text
    if isinstance(ref, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {text!r}")
    if isinstance(ref, list):
        return [int(v) for v in text.replace(" ", "").split(",") if v]
    if isinstance(ref, int):
        return int(text)
    if isinstance(ref, float):
        return float(text)
    return text


def parse_config_file(path):
    """Read ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    known = defaults()
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            try:
                values[key] = _coerce(key, value)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    return values


def resolve(config_path=None, overrides=None):
    """Merge defaults, file values and non-None overrides, logging where each came from."""
    merged = defaults()
    source = {k: "default" for k in merged}
    if config_path:
        for k, v in parse_config_file(config_path).items():
            merged[k] = v
            source[k] = "file"
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in merged:
            raise ValueError(f"unknown key {k!r}")
        merged[k] = v
        source[k] = "flag"
    for k in sorted(merged):
        if k not in IO_KEYS:
            log.info("config %s = %r (%s)", k, merged[k], source[k])
    return merged


def arch_config(values):
    return ArchitectureConfig(**{k: values[k] for k in ARCH_FIELDS}).validate()


def train_config(values):
    return TrainConfig(**{k: values[k] for k in TRAIN_FIELDS}).validate()
