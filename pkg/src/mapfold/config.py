"""Declarative experiment configuration with layered overrides.

Precedence: config file < environment (``ADP_`` prefix) < command-line
overrides.  Keys are dotted paths into a nested mapping; environment
variables spell the dots as double underscores (``ADP_REFINE__K=4``).
The full schema is documented in the README.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

ENV_PREFIX = "ADP_"


class ConfigError(ValueError):
    pass


def _coerce(text: str):
    """Parse override values with YAML scalar rules (ints, floats, bools)."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def _set_path(tree: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override scalar key {p!r} with a subtree")
    node[parts[-1]] = value


def load_config(path=None, overrides=(), environ=None) -> dict:
    """Load the config file and fold in env + key=value overrides."""
    tree: dict = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a key-value tree")
        tree = loaded
    env = os.environ if environ is None else environ
    for key, value in sorted(env.items()):
        if not key.startswith(ENV_PREFIX):
            continue
        dotted = key[len(ENV_PREFIX):].lower().replace("__", ".")
        _set_path(tree, dotted, _coerce(value))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, _, value = item.partition("=")
        _set_path(tree, key.strip(), _coerce(value))
    return tree


def get_path(tree: dict, dotted: str, default=None):
    node = tree
    for p in dotted.split("."):
        if not isinstance(node, dict) or p not in node:
            return default
        node = node[p]
    return node


def require(tree: dict, dotted: str):
    sentinel = object()
    value = get_path(tree, dotted, sentinel)
    if value is sentinel or value is None:
        raise ConfigError(f"missing required config key: {dotted}")
    return value


@dataclass
class ExperimentSpec:
    """Resolved invocation plan for one reconstruction task."""

    task: str
    tree: dict = field(default_factory=dict)
    out_dir: Path = Path("out")

    def __post_init__(self):
        if self.task not in ("complete", "distances", "refine",
                             "simulate-map", "bench", "serve-echo"):
            raise ConfigError(f"unknown task {self.task!r}")
        self.out_dir = Path(self.out_dir)

    def get(self, dotted: str, default=None):
        return get_path(self.tree, dotted, default)

    def require(self, dotted: str):
        return require(self.tree, dotted)

    def to_json(self) -> str:
        return json.dumps({"task": self.task, "out": str(self.out_dir),
                           "config": self.tree}, indent=2, sort_keys=True)
