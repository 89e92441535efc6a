"""Experiment configuration: dataclasses, strict YAML parsing, canonical hash."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields, is_dataclass
from typing import get_type_hints

import yaml

METHODS = ("customkd", "fitnet", "soft_target", "logits", "none")

# (hidden widths, embedding dim, pool samples per class per domain); scale
# varies width, depth and pretraining-pool breadth at a fixed embedding size
TEACHER_PRESETS: dict[str, tuple[list[int], int, int]] = {
    "tiny": ([32], 64, 20),
    "small": ([64, 64], 64, 30),
    "large": ([128, 128, 128], 64, 300),
}


class ConfigError(ValueError):
    """Invalid configuration; the message carries the offending field path."""


@dataclass
class BenchmarkConfig:
    kind: str = "uda"                 # uda | ssl | csv
    classes: int = 8
    dim: int = 16
    per_class: int = 40               # uda: labeled source samples per class
    unlabeled_per_class: int = 80     # uda
    eval_per_class: int = 100         # uda
    rotation_deg: float = 22.0
    translation: float = 8.0
    noise: float = 0.6
    target_noise: float | None = None
    radius: float = 3.0
    style_dims: int = 4
    style_scale: float = 2.0
    style_shift: float = 3.0   # uda: offset of the target domain's style distribution
    labels_per_class: int = 4         # ssl
    unlabeled_count: int = 600        # ssl
    eval_count: int = 500             # ssl
    path: str | None = None           # csv


@dataclass
class TeacherConfig:
    preset: str | None = "large"
    hidden: list[int] | None = None   # overrides the preset when given
    embed: int | None = None
    pool_per_class: int | None = None
    epochs: int = 60
    lr: float = 0.02

    def resolved(self) -> tuple[list[int], int, int]:
        """(hidden widths, embedding dim, pool per class) after preset lookup."""
        if self.preset is not None:
            if self.preset not in TEACHER_PRESETS:
                raise ConfigError(f"teacher.preset: unknown preset {self.preset!r}, "
                                  f"expected one of {sorted(TEACHER_PRESETS)}")
            hidden, embed, pool = TEACHER_PRESETS[self.preset]
        else:
            hidden = embed = pool = None
        hidden = self.hidden if self.hidden is not None else hidden
        embed = self.embed if self.embed is not None else embed
        pool = self.pool_per_class if self.pool_per_class is not None else pool
        if hidden is None or embed is None or pool is None:
            raise ConfigError("teacher: without a preset, hidden, embed and "
                              "pool_per_class must all be given")
        return list(hidden), embed, pool


@dataclass
class StudentConfig:
    hidden: list[int] = field(default_factory=lambda: [16, 16])
    embed: int = 8
    epochs: int = 30
    lr: float = 0.02


@dataclass
class TrainConfig:
    method: str = "customkd"
    kd_epochs: int = 40
    ratio_k: int = 1
    batch_size: int = 32
    lr: float = 0.0005
    lr_proj: float = 0.02
    momentum: float = 0.9
    lambda_u: float = 0.1
    lambda_ft: float = 10.0
    lambda_ftilde: float = 10.0
    lambda_kd: float = 1.0
    temperature: float | None = None  # required for soft_target
    fc_head_init: str = "student"     # student | random
    reinit_proj_t: bool = False
    fc_warmup_passes: int = 9
    proj_s_warmup_passes: int = 5
    use_bn: bool = True
    probe_epochs: int = 20
    probe_lr: float = 0.1
    clip_norm: float | None = 50.0
    eval_every: int = 1
    cka_probes: bool = False


@dataclass
class ExperimentConfig:
    benchmark: BenchmarkConfig = field(default_factory=BenchmarkConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    student: StudentConfig = field(default_factory=StudentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    out_dir: str | None = None


_SCALARS = {int, float, str, bool}


def _coerce(value, hint, path: str):
    origin = getattr(hint, "__origin__", None)
    args = getattr(hint, "__args__", ())
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return [_coerce(v, args[0], f"{path}[{i}]") for i, v in enumerate(value)]
    if args:  # unions, e.g. float | None
        if value is None and type(None) in args:
            return None
        for arg in args:
            if arg is type(None):
                continue
            try:
                return _coerce(value, arg, path)
            except ConfigError:
                pass
        raise ConfigError(f"{path}: expected one of {args}, got {value!r}")
    raise ConfigError(f"{path}: unsupported field type {hint}")


def _build(dc_type, raw, path: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping, got {raw!r}")
    hints = get_type_hints(dc_type)
    names = {f.name for f in fields(dc_type)}
    kwargs = {}
    for key, value in raw.items():
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key")
        sub = f"{path}.{key}" if path else key
        hint = hints[key]
        if is_dataclass(hint):
            kwargs[key] = _build(hint, value, sub)
        else:
            kwargs[key] = _coerce(value, hint, sub)
    return dc_type(**kwargs)


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    b, t = cfg.benchmark, cfg.train
    if b.kind not in ("uda", "ssl", "csv"):
        raise ConfigError(f"benchmark.kind: expected uda, ssl or csv, got {b.kind!r}")
    if b.kind == "csv" and not b.path:
        raise ConfigError("benchmark.path: required when benchmark.kind is csv")
    if b.kind != "csv" and (b.classes < 2 or b.dim < 2):
        raise ConfigError("benchmark: classes >= 2 and dim >= 2 required")
    if t.method not in METHODS:
        raise ConfigError(f"train.method: expected one of {METHODS}, got {t.method!r}")
    if t.method == "soft_target":
        if t.temperature is None:
            raise ConfigError("train.temperature: required when method is soft_target")
        if t.temperature <= 0:
            raise ConfigError(f"train.temperature: must be > 0, got {t.temperature}")
    if t.fc_head_init not in ("student", "random"):
        raise ConfigError(f"train.fc_head_init: expected student or random, "
                          f"got {t.fc_head_init!r}")
    if t.kd_epochs < 0 or t.ratio_k < 1:
        raise ConfigError("train: kd_epochs >= 0 and ratio_k >= 1 required")
    if t.batch_size < 2:
        raise ConfigError(f"train.batch_size: must be >= 2, got {t.batch_size}")
    for name in ("lambda_u", "lambda_ft", "lambda_ftilde", "lambda_kd"):
        if getattr(t, name) < 0:
            raise ConfigError(f"train.{name}: must be >= 0")
    if cfg.student.epochs < 0 or cfg.teacher.epochs < 0:
        raise ConfigError("pretraining epochs must be >= 0")
    cfg.teacher.resolved()  # raises on an unresolvable teacher spec
    if min([cfg.student.embed, *cfg.student.hidden]) < 1:
        raise ConfigError("student: layer dims must be positive")
    return cfg


def parse_config(source: str) -> ExperimentConfig:
    """Parse a YAML config from a file path or inline text; unknown keys and
    type mismatches are rejected with the offending field path."""
    text = source
    if os.path.exists(source):
        with open(source) as fh:
            text = fh.read()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    return validate_config(_build(ExperimentConfig, raw, ""))


def to_dict(obj) -> dict:
    """Plain nested-dict form of a config (round-trips through parse_config)."""
    out = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        out[f.name] = to_dict(v) if is_dataclass(v) else v
    return out


def config_hash(cfg: ExperimentConfig) -> str:
    """Stable 12-hex digest over every semantically meaningful field (the
    output directory does not affect results and is excluded)."""
    payload = to_dict(cfg)
    payload.pop("out_dir", None)
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]
