"""Run configuration: one TOML file with a table per module.

Every key in the shipped ``default_config.toml`` mirrors a dataclass default;
unknown sections or keys are rejected, as are values of the wrong type.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Mapping

import tomli

from .detector import DetectorConfig, PretrainSchedule
from .evalbench import METHODS
from .fusion import FusionSchedule
from .meta import MetaConfig
from .supervisor import SupervisorConfig
from .world import WorldConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    methods: tuple[str, ...] = METHODS
    num_train_tasks: int = 64
    num_test_tasks: int = 16
    pretrain_frames: int = 2048
    transfer_n: int = 4


SECTIONS = {
    "world": WorldConfig,
    "detector": DetectorConfig,
    "pretrain": PretrainSchedule,
    "supervisor": SupervisorConfig,
    "meta": MetaConfig,
    "fusion": FusionSchedule,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    pretrain: PretrainSchedule = field(default_factory=PretrainSchedule)
    supervisor: SupervisorConfig = field(default_factory=SupervisorConfig)
    meta: MetaConfig = field(default_factory=MetaConfig)
    fusion: FusionSchedule = field(default_factory=FusionSchedule)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out: str = "runs"

    def __post_init__(self):
        validate(self)

    def replace(self, **sections) -> "RunConfig":
        return dataclasses.replace(self, **sections)

    def section(self, name: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{name: dataclasses.replace(getattr(self, name), **changes)})

    def as_dict(self) -> dict:
        out: dict[str, Any] = {"seed": self.seed, "out": self.out}
        for name in SECTIONS:
            out[name] = {k: _plain(v) for k, v in dataclasses.asdict(getattr(self, name)).items()}
        return out


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def validate(cfg: RunConfig) -> None:
    w, d, s, m = cfg.world, cfg.detector, cfg.supervisor, cfg.meta
    pairs = [
        ("world.image_size", w.image_size, "detector.image_size", d.image_size),
        ("world.channels", w.channels, "detector.channels", d.channels),
        ("world.num_classes", w.num_classes, "detector.num_classes", d.num_classes),
        ("detector.dim", d.dim, "supervisor.det_dim", s.det_dim),
        ("detector.queries", d.queries, "supervisor.queries", s.queries),
    ]
    for a, va, b, vb in pairs:
        if va != vb:
            raise ConfigError(f"{a}={va} disagrees with {b}={vb}")
    if d.image_size % d.patch:
        raise ConfigError("detector.patch must divide detector.image_size")
    if d.dim % d.heads or s.dim % s.heads:
        raise ConfigError("model widths must be divisible by their head counts")
    if not 1 <= m.n <= s.max_steps:
        raise ConfigError(f"meta.n={m.n} outside [1, supervisor.max_steps={s.max_steps}]")
    if not 1 <= cfg.eval.transfer_n <= s.max_steps:
        raise ConfigError("eval.transfer_n outside [1, supervisor.max_steps]")
    bad = [x for x in cfg.eval.methods if x not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}")
    if not cfg.eval.seeds:
        raise ConfigError("eval.seeds is empty")
    if cfg.seed < 0 or cfg.seed >= 2**64:
        raise ConfigError("seed must be an unsigned 64-bit integer")
    p, f, e = cfg.pretrain, cfg.fusion, cfg.eval
    positive = {
        "world.grid_size": w.grid_size - 2,  # room for a wall ring plus one cell
        "world.image_size": w.image_size,
        "world.num_classes": w.num_classes,
        "detector.patch": d.patch,
        "detector.dim": d.dim,
        "detector.heads": d.heads,
        "detector.ffn": d.ffn,
        "detector.queries": d.queries,
        "supervisor.dim": s.dim,
        "supervisor.layers": s.layers,
        "supervisor.heads": s.heads,
        "supervisor.mlp_hidden": s.mlp_hidden,
        "supervisor.loss_out": s.loss_out,
        "pretrain.epochs": p.epochs,
        "pretrain.batch_size": p.batch_size,
        "meta.epochs": m.epochs,
        "meta.batch_size": m.batch_size,
        "fusion.epochs": f.epochs,
        "fusion.batch_size": f.batch_size,
        "eval.num_train_tasks": e.num_train_tasks,
        "eval.num_test_tasks": e.num_test_tasks,
        "eval.pretrain_frames": e.pretrain_frames,
    }
    for k, v in positive.items():
        if v < 1:
            raise ConfigError(f"{k} is too small")
    for k, v in {"pretrain.lr": p.lr, "pretrain.weight_decay": p.weight_decay, "fusion.lr": f.lr, "fusion.weight_decay": f.weight_decay,
                 "meta.beta1": m.beta1, "meta.beta2": m.beta2, "meta.beta3": m.beta3, "meta.weight_decay": m.weight_decay}.items():
        if not v >= 0:
            raise ConfigError(f"{k} must be >= 0")
    if w.max_objects < w.min_objects or w.min_objects < 0:
        raise ConfigError("world object counts must satisfy 0 <= min_objects <= max_objects")


def _coerce(section: str, key: str, value, default):
    where = f"{section}.{key}" if section else key
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be an array, got {value!r}")
        if default:
            return tuple(_coerce(section, key, v, default[0]) for v in value)
        return tuple(value)
    raise ConfigError(f"{where}: unsupported value {value!r}")


def from_dict(raw: Mapping[str, Any], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    changes: dict[str, Any] = {}
    for key, value in raw.items():
        if key in SECTIONS:
            if not isinstance(value, Mapping):
                raise ConfigError(f"[{key}] must be a table")
            current = getattr(base, key)
            defaults = {f.name: getattr(current, f.name) for f in dataclasses.fields(current)}
            unknown = sorted(set(value) - set(defaults))
            if unknown:
                raise ConfigError(f"unknown keys in [{key}]: {', '.join(unknown)}")
            upd = {k: _coerce(key, k, v, defaults[k]) for k, v in value.items()}
            try:
                changes[key] = dataclasses.replace(current, **upd)
            except ValueError as e:
                raise ConfigError(f"[{key}]: {e}") from e
        elif key in ("seed", "out"):
            changes[key] = _coerce("", key, value, getattr(base, key))
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    try:
        return dataclasses.replace(base, **changes)
    except ConfigError:
        raise
    except ValueError as e:
        raise ConfigError(str(e)) from e


def default_text() -> str:
    return resources.files("adaptdet").joinpath("default_config.toml").read_text()


def load(path=None) -> RunConfig:
    """Defaults overlaid with the file at ``path`` (if any)."""
    cfg = from_dict(tomli.loads(default_text()))
    if path is None:
        return cfg
    try:
        with open(path, "rb") as fh:
            raw = tomli.load(fh)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e
    return from_dict(raw, cfg)


def dumps(cfg: RunConfig) -> str:
    """TOML text for ``cfg`` (the format ``load`` reads)."""
    d = cfg.as_dict()
    lines = [f"seed = {d['seed']}", f"out = {_toml(d['out'])}"]
    for name in SECTIONS:
        lines += ["", f"[{name}]"]
        lines += [f"{k} = {_toml(v)}" for k, v in d[name].items()]
    return "\n".join(lines) + "\n"


def _toml(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, list):
        return "[" + ", ".join(_toml(x) for x in v) + "]"
    return str(v)
