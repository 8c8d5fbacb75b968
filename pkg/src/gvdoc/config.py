"""Run configuration: flat-key TOML over model, graph and train settings."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

import tomli

from .errors import ConfigError
from .gnn import ModelConfig
from .graph import GraphConfig
from .train import TrainConfig

SECTIONS = {"model": ModelConfig, "graph": GraphConfig, "train": TrainConfig}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def to_dict(self):
        out = {name: asdict(getattr(self, name)) for name in SECTIONS}
        out["graph"]["para_k_train_range"] = list(self.graph.para_k_train_range)
        out["seed"] = self.seed
        return out

    def hash(self):
        """sha256 of the canonical JSON form; recorded in every output artifact."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _flatten(obj, prefix=""):
    for k, v in obj.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        else:
            yield key, v


def _coerce(key, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and len(value) == len(default)
        value = tuple(value) if ok else value
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(key, f"expected {type(default).__name__}, got {value!r}")
    return value


def config_from_mapping(flat: dict) -> RunConfig:
    """Build a :class:`RunConfig` from ``{"model.d": 64, "seed": 1, ...}``.

    A top-level ``seed`` also seeds ``graph`` and ``train`` unless those
    set their own. Unknown keys raise :class:`ConfigError` naming the key;
    invariant violations raise :class:`InvariantError`.
    """
    updates = {name: {} for name in SECTIONS}
    seed = 0
    for key, value in flat.items():
        if key == "seed":
            seed = _coerce(key, value, 0)
            continue
        section, _, name = key.partition(".")
        cls = SECTIONS.get(section)
        known = {f.name: f for f in fields(cls)} if cls else {}
        if name not in known:
            raise ConfigError(key, "unknown configuration key")
        updates[section][name] = _coerce(key, value, getattr(cls(), name))
    for section in ("graph", "train"):
        updates[section].setdefault("seed", seed)
    try:
        parts = {name: cls(**updates[name]) for name, cls in SECTIONS.items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError("config", str(exc)) from None
    return RunConfig(seed=seed, **parts)


def parse_config(text: str) -> RunConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("toml", str(exc)) from None
    return config_from_mapping(dict(_flatten(data)))


def load_config(path=None, overrides=None) -> RunConfig:
    """Load a TOML file (or defaults when ``path`` is None) plus flat overrides."""
    flat = {}
    if path is not None:
        with open(path, "rb") as fh:
            try:
                flat = dict(_flatten(tomli.load(fh)))
            except tomli.TOMLDecodeError as exc:
                raise ConfigError(str(path), str(exc)) from None
    flat.update(overrides or {})
    return config_from_mapping(flat)


def with_changes(cfg: RunConfig, section: str, **changes) -> RunConfig:
    return replace(cfg, **{section: replace(getattr(cfg, section), **changes)})
