"""Experiment configuration: YAML files with a versioned schema.

Validation errors carry ``file:line`` locations taken from the YAML node
marks so a bad key can be found directly.
"""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import inspect
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..envs import ENVIRONMENTS
from ..offpolicy import OffPolicyConfig
from ..onpolicy import OnPolicyConfig

SCHEMA_VERSION = 1
TOP_LEVEL = {"schema_version", "name", "trainer", "env", "seeds", "max_env_steps", "output_dir", "variant",
             "onpolicy", "offpolicy"}
DEFAULT_SEEDS = (0, 100, 200)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    name: str
    trainer: str
    env_name: str
    env_params: dict
    seeds: list
    max_env_steps: int
    output_dir: str
    variant: str = "full"
    onpolicy: OnPolicyConfig = field(default_factory=OnPolicyConfig)
    offpolicy: OffPolicyConfig = field(default_factory=OffPolicyConfig)
    schema_version: int = SCHEMA_VERSION

    @property
    def trainer_config(self):
        return self.onpolicy if self.trainer == "onpolicy" else self.offpolicy

    def to_dict(self):
        d = {
            "schema_version": self.schema_version,
            "name": self.name,
            "trainer": self.trainer,
            "env": {"name": self.env_name, "params": dict(self.env_params)},
            "seeds": list(self.seeds),
            "max_env_steps": self.max_env_steps,
            "output_dir": self.output_dir,
            "variant": self.variant,
        }
        d[self.trainer] = dataclasses.asdict(self.trainer_config)
        return d

    def content_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def replace(self, **changes):
        new = copy.deepcopy(self)
        for k, v in changes.items():
            setattr(new, k, v)
        return new

    def with_trainer(self, **changes):
        """Copy with fields of the active trainer config replaced (re-validated)."""
        new = copy.deepcopy(self)
        cfg = dataclasses.replace(new.trainer_config, **changes)
        setattr(new, self.trainer, cfg)
        return new


def _line(node):
    return node.start_mark.line + 1


def _to_python(node, where):
    """Plain Python value from a YAML node, plus a map of dotted key -> line."""
    lines = {}

    def walk(n, path):
        if isinstance(n, yaml.MappingNode):
            out = {}
            for k_node, v_node in n.value:
                key = k_node.value
                sub = f"{path}.{key}" if path else key
                if key in out:
                    raise ConfigError(f"{where}:{_line(k_node)}: duplicate key {sub!r}")
                lines[sub] = _line(k_node)
                out[key] = walk(v_node, sub)
            return out
        if isinstance(n, yaml.SequenceNode):
            return [walk(v, f"{path}[{i}]") for i, v in enumerate(n.value)]
        return yaml.safe_load(yaml.serialize(n))

    return walk(node, ""), lines


_TYPE_CHECKS = {
    "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "bool": lambda v: isinstance(v, bool),
    "str": lambda v: isinstance(v, str),
}


def _type_ok(type_str, value):
    options = [t.strip() for t in str(type_str).split("|")]
    if value is None:
        return "None" in options
    return any(_TYPE_CHECKS.get(t, lambda v: True)(value) for t in options if t != "None")


def _trainer_section(cls, data, section, where, lines):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}:{lines.get(section, '?')}: {section} must be a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        line = lines.get(f"{section}.{key}", "?")
        if key not in names:
            raise ConfigError(f"{where}:{line}: unknown key {key!r} in {section}")
        if not _type_ok(names[key].type, value):
            raise ConfigError(f"{where}:{line}: {section}.{key} must be {names[key].type}, got {value!r}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}:{lines.get(section, '?')}: invalid {section} settings: {exc}") from None


def parse_config(data: dict, where="<config>", lines=None) -> ExperimentConfig:
    lines = lines or {}

    def at(key):
        return f"{where}:{lines.get(key, '?')}"

    if not isinstance(data, dict):
        raise ConfigError(f"{where}:1: top level must be a mapping")
    for key in data:
        if key not in TOP_LEVEL:
            raise ConfigError(f"{at(key)}: unknown key {key!r}")
    version = data.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"{at('schema_version')}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
    trainer = data.get("trainer", "onpolicy")
    if trainer not in ("onpolicy", "offpolicy"):
        raise ConfigError(f"{at('trainer')}: trainer must be 'onpolicy' or 'offpolicy'")
    env = data.get("env")
    if not isinstance(env, dict) or "name" not in env:
        raise ConfigError(f"{at('env')}: env needs a 'name'")
    for key in env:
        if key not in ("name", "params"):
            raise ConfigError(f"{at('env.' + key)}: unknown key {key!r} in env")
    env_name = env["name"]
    if env_name not in ENVIRONMENTS:
        raise ConfigError(f"{at('env.name')}: unknown environment {env_name!r}; choose from {sorted(ENVIRONMENTS)}")
    env_params = env.get("params") or {}
    accepted = set(inspect.signature(ENVIRONMENTS[env_name]).parameters)
    for key in env_params:
        if key not in accepted:
            raise ConfigError(f"{at('env.params.' + key)}: {env_name} has no parameter {key!r}")
    seeds = data.get("seeds", list(DEFAULT_SEEDS))
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and not isinstance(s, bool)
                                                           for s in seeds):
        raise ConfigError(f"{at('seeds')}: seeds must be a non-empty list of integers")
    steps = data.get("max_env_steps")
    if not isinstance(steps, int) or isinstance(steps, bool) or steps < 1:
        raise ConfigError(f"{at('max_env_steps')}: max_env_steps must be a positive integer")
    for key in ("name", "output_dir", "variant"):
        if key in data and not isinstance(data[key], str):
            raise ConfigError(f"{at(key)}: {key} must be a string")
    on = _trainer_section(OnPolicyConfig, data.get("onpolicy") or {}, "onpolicy", where, lines)
    off = _trainer_section(OffPolicyConfig, data.get("offpolicy") or {}, "offpolicy", where, lines)
    return ExperimentConfig(
        name=data.get("name", "experiment"), trainer=trainer, env_name=env_name, env_params=dict(env_params),
        seeds=list(seeds), max_env_steps=steps, output_dir=data.get("output_dir", "runs"),
        variant=data.get("variant", "full"), onpolicy=on, offpolicy=off,
    )


def apply_overrides(data: dict, overrides, where="--set"):
    """Apply ``dotted.key=value`` strings to the raw mapping (values parsed as YAML)."""
    data = copy.deepcopy(data)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"{where}: override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        if parts[0] not in TOP_LEVEL and not (parts[0] == "env"):
            raise ConfigError(f"{where}: unknown key {key!r}")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"{where}: {key!r} does not name a mapping entry")
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc}") from None
    try:
        node = yaml.compose(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        # errors at end of input point one past the last line
        line = min(mark.line + 1, max(len(text.splitlines()), 1)) if mark else "?"
        raise ConfigError(f"{path}:{line}: YAML syntax error: {getattr(exc, 'problem', exc)}") from None
    if node is None:
        raise ConfigError(f"{path}:1: empty config")
    data, lines = _to_python(node, str(path))
    data = apply_overrides(data, overrides)
    return parse_config(data, str(path), lines)


def git_blob_hash(data: bytes) -> str:
    """Content hash in the same form ``git hash-object`` prints."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()
