"""Flat ``section.key = value`` experiment configs, validation and presets.

A config file is plain text, one assignment per line; ``#`` starts a
comment. Every key has a typed default, so an empty file is a complete
config.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .data import CORNERS


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(p) for p in text.split(",") if p.strip())


def _strs(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _auto_float(text: str):
    t = text.strip().lower()
    return t if t in ("auto", "median") else float(t)


_TYPE_NAMES = {int: "an integer", float: "a number", str: "a string", _bool: "a boolean",
               _ints: "comma-separated integers", _strs: "comma-separated names",
               _auto_float: "a number or keyword"}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class Field:
    key: str
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] = lambda v: True
    constraint: str = ""
    meaningful: bool = True


def _choice(*options):
    return (lambda v: v in options), "one of " + ", ".join(options)


_pos = (lambda v: v > 0), "> 0"
_nonneg = (lambda v: v >= 0), ">= 0"
_ge1 = (lambda v: v >= 1), ">= 1"

FIELDS: tuple[Field, ...] = (
    Field("federation.n_clients", int, 20, *_ge1),
    Field("federation.k", int, 10, *_ge1),
    Field("federation.server_lr", float, 1.0, *_pos),
    Field("federation.rounds", int, 40, *_nonneg),
    Field("federation.pretrain_rounds", int, 20, *_nonneg),
    Field("federation.n_attackers", int, 3, *_nonneg),
    Field("federation.eval_every", int, 5, *_ge1),
    Field("federation.early_stop", _bool, False),
    Field("federation.aggregate_projector", _bool, True),

    Field("data.source", str, "synthetic", *_choice("synthetic", "file")),
    Field("data.path", str, ""),
    Field("data.task_paths", _strs, ()),
    Field("data.shape", _ints, (3, 16, 16), lambda v: len(v) == 3 and min(v) >= 1, "three positive ints C,H,W"),
    Field("data.n_classes", int, 10, lambda v: v >= 2, ">= 2"),
    Field("data.n_per_class", int, 100, *_ge1),
    Field("data.class_separation", float, 8.0, *_pos),
    Field("data.noise", float, 0.1, *_nonneg),
    Field("data.world_seed", int, 1234),
    Field("data.partition", str, "iid", *_choice("iid", "dirichlet")),
    Field("data.alpha", float, 0.5, *_pos),
    Field("data.task_n_per_class", int, 60, *_ge1),
    Field("data.task_train_fraction", float, 2 / 3, lambda v: 0 < v < 1, "in (0, 1)"),
    Field("data.monitor_n_per_class", int, 40, *_ge1),
    Field("data.attacker_source", str, "own", *_choice("own", "foreign")),
    Field("data.foreign_world_seed", int, 4321),
    Field("data.foreign_n_per_class", int, 10, *_ge1),

    Field("contrastive.temperature", float, 0.5, *_pos),
    Field("contrastive.batch_size", int, 32, lambda v: v >= 2, ">= 2"),
    Field("contrastive.local_epochs", int, 1, *_ge1),
    Field("contrastive.learning_rate", float, 0.1, *_nonneg),
    Field("contrastive.augment", _bool, True),
    Field("contrastive.crop_min_area", float, 0.5, lambda v: 0 < v <= 1, "in (0, 1]"),
    Field("contrastive.flip", _bool, True),
    Field("contrastive.pixel_noise", float, 0.03, *_nonneg),
    Field("contrastive.brightness", float, 0.2, lambda v: 0 <= v < 1, "in [0, 1)"),

    Field("attack.mode", str, "decentralized", *_choice("centralized", "decentralized")),
    Field("attack.lambda1", float, 1.0, *_nonneg),
    Field("attack.lambda2", float, 1.0, *_nonneg),
    Field("attack.lambda3", float, 1.0, *_nonneg),
    Field("attack.local_epochs", int, 10, *_ge1),
    Field("attack.learning_rate", float, 0.5, *_nonneg),
    Field("attack.batch_size", int, 8, *_ge1),
    Field("attack.gamma", float, 100.0, lambda v: v >= 1, ">= 1"),
    Field("attack.schedule", str, "multi_shot", *_choice("multi_shot", "one_shot")),
    Field("attack.period", int, 100, *_ge1),
    Field("attack.target_classes", _ints, (1, 9, 3), lambda v: len(v) >= 1, "at least one class"),
    Field("attack.trigger_side", int, 6, *_nonneg),
    Field("attack.trigger_corners", _strs, ("bottom_right", "top_left", "top_right"),
          lambda v: len(v) >= 1 and all(c in CORNERS for c in v), "corners from " + ", ".join(CORNERS)),
    Field("attack.n_references", int, 1, *_ge1),

    Field("defense.kind", str, "none", *_choice("none", "foolsgold", "clip_noise")),
    Field("defense.clip_threshold", _auto_float, "median",
          lambda v: v == "median" or (isinstance(v, float) and v > 0), "'median' or a float > 0"),
    Field("defense.noise_sigma", _auto_float, "auto",
          lambda v: v == "auto" or (isinstance(v, float) and v >= 0), "'auto' or a float >= 0"),
    Field("defense.noise_rel", float, 1e-3, *_nonneg),
    Field("defense.epsilon", float, 1e-5, *_pos),

    Field("eval.knn_k", int, 200, *_ge1),
    Field("eval.knn_tau", float, 0.07, *_pos),
    Field("eval.probe_epochs", int, 500, *_ge1),
    Field("eval.probe_lr", float, 0.5, *_pos),
    Field("eval.probe_l2", float, 1e-4, *_nonneg),
    Field("eval.normalize_features", _bool, True),
    Field("eval.asr_include_target", _bool, True),
    Field("eval.cdf_probe_size", int, 200, *_ge1),

    Field("run.seed", int, 0, lambda v: 0 <= v < 2 ** 64, "an unsigned 64-bit integer"),
    Field("run.out", str, "", meaningful=False),
    Field("run.threads", int, 1, *_ge1, meaningful=False),
)

SCHEMA = {f.key: f for f in FIELDS}


class ExperimentConfig:
    """A fully resolved config: every schema key has a value."""

    def __init__(self, values: dict[str, Any] | None = None):
        merged = {f.key: f.default for f in FIELDS}
        for key, value in (values or {}).items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown key {key!r}")
            merged[key] = value
        self.values = merged
        self.validate()

    def __getitem__(self, key: str):
        return self.values[key]

    def replace(self, **overrides) -> "ExperimentConfig":
        """Copy with overrides; keyword names use ``__`` for the dot."""
        vals = dict(self.values)
        vals.update({k.replace("__", "."): v for k, v in overrides.items()})
        return ExperimentConfig(vals)

    def merged(self, values: dict[str, Any]) -> "ExperimentConfig":
        vals = dict(self.values)
        vals.update(values)
        return ExperimentConfig(vals)

    @property
    def n_targets(self) -> int:
        return len(self["attack.target_classes"])

    def validate(self) -> None:
        for key, value in self.values.items():
            f = SCHEMA[key]
            if not f.check(value):
                raise ConfigError(f"{key} = {_fmt(value)!r} violates constraint: {f.constraint}")
        v = self.values
        if v["federation.k"] > v["federation.n_clients"]:
            raise ConfigError("federation.k must be <= federation.n_clients")
        if v["federation.n_attackers"] > v["federation.k"]:
            raise ConfigError("federation.n_attackers must be <= federation.k")
        if v["federation.n_clients"] - v["federation.n_attackers"] < v["federation.k"]:
            raise ConfigError("federation.n_clients - federation.n_attackers must be >= federation.k")
        if (v["attack.mode"] == "decentralized" and v["federation.n_attackers"] > 0
                and v["federation.n_attackers"] != self.n_targets):
            raise ConfigError(
                f"attack.mode = decentralized needs federation.n_attackers == number of targets "
                f"({v['federation.n_attackers']} != {self.n_targets})")
        if len(v["attack.trigger_corners"]) < self.n_targets:
            raise ConfigError("attack.trigger_corners must name a corner for every target class")
        if max(v["attack.lambda1"], v["attack.lambda2"], v["attack.lambda3"]) <= 0:
            raise ConfigError("at least one of attack.lambda1..3 must be > 0")
        if any(c >= v["data.n_classes"] or c < 0 for c in v["attack.target_classes"]):
            raise ConfigError("attack.target_classes must lie in [0, data.n_classes)")
        if v["data.source"] == "file" and not v["data.path"]:
            raise ConfigError("data.source = file requires data.path")
        side = v["attack.trigger_side"]
        if side and side > min(v["data.shape"][1:]):
            raise ConfigError("attack.trigger_side exceeds the image size")

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(self.values[k])}\n" for k in sorted(self.values))

    def semantic_dict(self) -> dict[str, Any]:
        return {k: v for k, v in sorted(self.values.items()) if SCHEMA[k].meaningful}

    def hash(self) -> str:
        blob = json.dumps({k: _fmt(v) for k, v in self.semantic_dict().items()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()

    def __eq__(self, other) -> bool:
        return isinstance(other, ExperimentConfig) and self.values == other.values

    __hash__ = None  # type: ignore[assignment]


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse assignments into typed values without applying defaults."""
    out: dict[str, Any] = {}
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, value = (p.strip() for p in line.partition("="))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        try:
            out[key] = SCHEMA[key].parse(value)
        except ValueError:
            expected = _TYPE_NAMES.get(SCHEMA[key].parse, "a valid value")
            raise ConfigError(f"{source}:{lineno}: {key} expects {expected}, got {value!r}") from None
    return out


def parse_config(path, base: ExperimentConfig | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    values = parse_config_text(text, str(path))
    return (base or ExperimentConfig()).merged(values)


# presets -------------------------------------------------------------------

_ONE_SHOT = {
    "attack.schedule": "one_shot",
    "attack.period": 10,
    # K / eta: full model replacement by each attacker
    "attack.gamma": 10.0,
    "federation.rounds": 30,
    "federation.eval_every": 1,
}

PRESETS: dict[str, dict[str, Any]] = {
    "baseline_noattack": {"federation.n_attackers": 0},
    "multishot_iid": {},
    "multishot_noniid": {"data.partition": "dirichlet", "data.alpha": 0.5},
    "oneshot": dict(_ONE_SHOT),
    "foolsgold_centralized": {"attack.mode": "centralized", "defense.kind": "foolsgold"},
    "foolsgold_decentralized": {"attack.mode": "decentralized", "defense.kind": "foolsgold"},
    # clipping slows an unscaled attack down, so it gets a longer attack phase
    "clipnoise_multishot": {"defense.kind": "clip_noise", "federation.rounds": 60},
    "clipnoise_oneshot": dict(_ONE_SHOT, **{"defense.kind": "clip_noise"}),
    "foreign_attacker_data": {"data.attacker_source": "foreign"},
}


def list_presets() -> list[str]:
    return list(PRESETS)


def preset(name: str, **overrides) -> ExperimentConfig:
    try:
        values = dict(PRESETS[name])
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
    values.setdefault("run.out", f"runs/{name}")
    cfg = ExperimentConfig(values)
    return cfg.replace(**overrides) if overrides else cfg
