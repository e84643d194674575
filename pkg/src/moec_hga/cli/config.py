"""Experiment configuration files.

The format is a TOML subset: top-level keys, ``[section]`` tables and
``[encoder.<group>]`` tables, with integers, reals, booleans, strings and
lists of strings.  Every key has a default, so an empty file is a valid
configuration.  Errors name the offending key and, when it came from a
file, its line.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Mapping

import tomli

from ..encoders import GROUP_ORDER, FULL_SCALE_TOKEN_COUNTS, EncoderSpec
from ..errors import ConfigError
from ..hga import HgaConfig
from ..moec import RENORMALIZE_MODES, MoecConfig
from ..pipeline import CONNECTORS, FUSIONS, ModelConfig, TaskSpec

OPTIMIZERS = ("sgd", "momentum")
SCHEDULES = ("constant", "cosine")


@dataclass(frozen=True)
class Field:
    kind: type
    default: Any
    choices: tuple | None = None
    minimum: float | None = None


def _schema() -> dict[str, Field]:
    s = {
        "seed": Field(int, 0),
        "steps": Field(int, 500, minimum=1),
        "batch_size": Field(int, 16, minimum=1),
        "learning_rate": Field(float, 0.5, minimum=0.0),
        "optimizer": Field(str, "sgd", OPTIMIZERS),
        "momentum": Field(float, 0.9, minimum=0.0),
        "schedule": Field(str, "constant", SCHEDULES),
        "out_dir": Field(str, "runs/default"),
        "metric_every": Field(int, 1, minimum=1),
        "checkpoint_every": Field(int, 0, minimum=0),
        "connector": Field(str, "moec", CONNECTORS),
        "fusion": Field(str, "hga", FUSIONS),
        "encoders": Field(list, list(GROUP_ORDER)),
        "token_scale": Field(int, 1, minimum=1),
        "aux_losses": Field(bool, True),
        "train_connector": Field(bool, True),
        "moec.num_experts": Field(int, 4, minimum=1),
        "moec.top_k": Field(int, 2, minimum=1),
        "moec.input_dim": Field(int, 16, minimum=1),
        "moec.hidden_dim": Field(int, 16, minimum=1),
        "moec.output_dim": Field(int, 16, minimum=1),
        "moec.renormalize": Field(str, "softmax", RENORMALIZE_MODES),
        "hga.top_m": Field(int, 3, minimum=1),
        "hga.top_n": Field(int, 7, minimum=1),
        "hga.gate_slope": Field(float, 10.0),
        "hga.gate_shift": Field(float, 0.2),
        "loss.alpha_balance": Field(float, 0.1, minimum=0.0),
        "loss.alpha_z": Field(float, 0.01, minimum=0.0),
        "task.num_classes": Field(int, 8, minimum=2),
        "task.rank": Field(int, 4, minimum=1),
        "task.parts": Field(int, 8, minimum=1),
        "task.part_noise": Field(float, 0.5, minimum=0.0),
        "task.token_noise": Field(float, 0.5, minimum=0.0),
        "task.view_noise": Field(float, 0.5, minimum=0.0),
        "task.seed": Field(int, 0),
        "task.eval_size": Field(int, 64, minimum=1),
    }
    for i, g in enumerate(GROUP_ORDER):
        pooled = g == "convnext"
        s[f"encoder.{g}.tokens"] = Field(int, FULL_SCALE_TOKEN_COUNTS[g], minimum=1)
        s[f"encoder.{g}.channels"] = Field(int, 64 if pooled else 16, minimum=1)
        s[f"encoder.{g}.pool"] = Field(bool, pooled)
        s[f"encoder.{g}.seed"] = Field(int, i + 1)
    return s


SCHEMA = _schema()


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated settings, keyed by dotted name (``moec.top_k``, ``encoder.clip.tokens``)."""

    settings: Mapping[str, Any] = field(default_factory=lambda: {k: f.default for k, f in SCHEMA.items()})

    def __getitem__(self, key):
        return self.settings[key]

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and dict(self.settings) == dict(other.settings)

    def __hash__(self):
        return hash(dumps_config(self))

    @property
    def steps(self) -> int:
        return self["steps"]

    @property
    def out_dir(self) -> str:
        return self["out_dir"]

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        merged = dict(self.settings)
        for key, value in overrides.items():
            merged[key] = _coerce(key, value, None)
        return validate(merged)

    def model_config(self) -> ModelConfig:
        return _build_model(self.settings)


def _coerce(key: str, value, line):
    if key not in SCHEMA:
        raise ConfigError("unknown key", key=key, line=line)
    f = SCHEMA[key]
    if f.kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", key=key, line=line)
    elif f.kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", key=key, line=line)
    elif f.kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a real number, got {value!r}", key=key, line=line)
        value = float(value)
    elif f.kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", key=key, line=line)
    elif f.kind is list:
        if isinstance(value, str):
            value = [v for v in value.replace("+", ",").split(",") if v]
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"expected a list of strings, got {value!r}", key=key, line=line)
        value = list(value)
    if f.choices is not None and value not in f.choices:
        raise ConfigError(f"{value!r} is not one of {list(f.choices)}", key=key, line=line)
    if f.minimum is not None and value < f.minimum:
        raise ConfigError(f"must be >= {f.minimum}, got {value!r}", key=key, line=line)
    return value


def _build_model(s: Mapping[str, Any]) -> ModelConfig:
    specs = []
    for g in GROUP_ORDER:
        if g not in s["encoders"]:
            continue
        channels = s[f"encoder.{g}.channels"]
        pool = s[f"encoder.{g}.pool"]
        tokens = max(1, round(s[f"encoder.{g}.tokens"] / s["token_scale"]))
        specs.append(
            EncoderSpec(
                g, tokens, channels, pool, s[f"encoder.{g}.seed"],
                s["moec.input_dim"] if pool else None,
            )
        )
    input_dim = specs[0].target_dim
    return ModelConfig(
        encoder_specs=tuple(specs),
        moec=MoecConfig(
            num_experts=s["moec.num_experts"],
            top_k=s["moec.top_k"],
            input_dim=input_dim,
            hidden_dim=s["moec.hidden_dim"],
            output_dim=s["moec.output_dim"],
            renormalize=s["moec.renormalize"],
        ),
        hga=HgaConfig(s["hga.top_m"], s["hga.top_n"], s["hga.gate_slope"], s["hga.gate_shift"]),
        alpha_balance=s["loss.alpha_balance"],
        alpha_z=s["loss.alpha_z"],
        task=TaskSpec(
            num_classes=s["task.num_classes"],
            rank=s["task.rank"],
            parts=s["task.parts"],
            part_noise=s["task.part_noise"],
            token_noise=s["task.token_noise"],
            view_noise=s["task.view_noise"],
            seed=s["task.seed"],
            eval_size=s["task.eval_size"],
        ),
        seed=s["seed"],
        connector=s["connector"],
        fusion=s["fusion"],
        aux_losses=s["aux_losses"],
        train_connector=s["train_connector"],
    )


def validate(settings: Mapping[str, Any], lines: Mapping[str, int] | None = None) -> ExperimentConfig:
    lines = lines or {}
    s = dict(settings)

    def fail(msg, key):
        raise ConfigError(msg, key=key, line=lines.get(key))

    if not s["encoders"]:
        fail("encoder subset must not be empty", "encoders")
    for g in s["encoders"]:
        if g not in GROUP_ORDER:
            fail(f"unknown encoder group '{g}'", "encoders")
    if len(set(s["encoders"])) != len(s["encoders"]):
        fail("encoder subset lists a group twice", "encoders")
    if s["moec.top_k"] > s["moec.num_experts"]:
        fail(f"top_k={s['moec.top_k']} exceeds num_experts={s['moec.num_experts']}", "moec.top_k")
    if not s["hga.gate_slope"] > 0:
        fail("gate_slope must be > 0", "hga.gate_slope")
    target = s["moec.input_dim"]
    for g in s["encoders"]:
        ch, pool = s[f"encoder.{g}.channels"], s[f"encoder.{g}.pool"]
        if pool and (ch < target or ch % target):
            fail(f"{ch} channels cannot be pooled to {target}", f"encoder.{g}.channels")
        if not pool and ch != target:
            fail(f"{ch} channels differ from moec.input_dim={target}; enable pool or change channels",
                 f"encoder.{g}.channels")
    config = ExperimentConfig(s)
    try:
        config.model_config()
    except ConfigError as err:
        key = next((k for k in SCHEMA if err.key and (k == err.key or k.endswith("." + err.key))), err.key)
        raise ConfigError(str(err).split(" (key")[0], key=key, line=lines.get(key)) from err
    return config


_HEADER = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-]+)\s*\]\s*(#.*)?$")
_KEY = re.compile(r"^\s*([A-Za-z0-9_\-]+)\s*=")


def _key_lines(text: str) -> dict[str, int]:
    lines, table = {}, ""
    for n, raw in enumerate(text.splitlines(), start=1):
        m = _HEADER.match(raw)
        if m:
            table = m.group(1)
            continue
        m = _KEY.match(raw)
        if m:
            lines[f"{table}.{m.group(1)}" if table else m.group(1)] = n
    return lines


def _flatten(data: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def loads_config(text: str) -> ExperimentConfig:
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as err:
        line = getattr(err, "lineno", None)
        if line is None:
            m = re.search(r"line (\d+)", str(err))
            line = int(m.group(1)) if m else None
        raise ConfigError(f"malformed config: {err}", line=line) from err
    lines = _key_lines(text)
    settings = {k: f.default for k, f in SCHEMA.items()}
    for key, value in _flatten(data).items():
        settings[key] = _coerce(key, value, lines.get(key))
    return validate(settings, lines)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return loads_config(fh.read())


def _literal(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(value, list):
        return "[" + ", ".join(_literal(v) for v in value) + "]"
    raise TypeError(f"cannot serialise {value!r}")


def dumps_config(config: ExperimentConfig) -> str:
    tables: dict[str, list[str]] = {}
    for key in SCHEMA:
        table, _, name = key.rpartition(".")
        tables.setdefault(table, []).append(f"{name} = {_literal(config.settings[key])}")
    out = list(tables.pop(""))
    for table, rows in tables.items():
        out.append("")
        out.append(f"[{table}]")
        out.extend(rows)
    return "\n".join(out) + "\n"


def parse_override(item: str) -> tuple[str, Any]:
    """``KEY=VALUE`` with VALUE read as a TOML literal, falling back to a bare string."""
    if "=" not in item:
        raise ConfigError(f"override '{item}' is not KEY=VALUE")
    key, raw = item.split("=", 1)
    key, raw = key.strip(), raw.strip()
    try:
        value = tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        value = raw
    if key not in SCHEMA:
        raise ConfigError("unknown key", key=key)
    return key, value


def default_config(**overrides) -> ExperimentConfig:
    return ExperimentConfig().with_overrides(overrides) if overrides else validate(ExperimentConfig().settings)


__all__ = [
    "ExperimentConfig",
    "SCHEMA",
    "default_config",
    "dumps_config",
    "load_config",
    "loads_config",
    "parse_override",
    "validate",
]
