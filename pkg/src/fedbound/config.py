"""Experiment configuration: nested dataclasses loaded from JSON."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import TRIGGERS, ConfigError

ATTACKS = ("none", "novel", "classic")
DEFENSES = ("none", "bounds", "normthr", "dp", "krum", "pruning")
FL_MODES = ("cross_silo", "cross_device")
PARTITION_MODES = ("iid", "dirichlet")
BOUND_INITS = ("constant", "activation_max")
WARM_STARTS = ("iterate", "best")


@dataclass
class DataConfig:
    n_classes: int = 10
    per_class: int = 200
    test_per_class: int = 100
    grid: int = 16
    noise: float = 0.05
    client_test_fraction: float = 0.25
    syn_per_class: int = 100
    syn_brightness: float = 0.1
    syn_noise: float = 0.1


@dataclass
class PartitionConfig:
    mode: str = "iid"
    beta: float = 0.1


@dataclass
class FLConfig:
    mode: str = "cross_silo"
    n_clients: int = 10
    rho: float = 0.1
    rounds: int = 50
    local_epochs: int = 5
    batch: int = 32
    lr_local: float = 1e-3
    distill_iters: int = 5
    distill_batch: int = 64
    lr_distill: float = 5e-4
    pretrain_epochs: int = 10
    pretrain_batch: int = 32
    lr_pretrain: float = 0.05


@dataclass
class ModelConfig:
    # hidden widths per prototype; a single entry means homogeneous FL
    prototypes: list = field(default_factory=lambda: [[64, 32]])
    bounded_layers: typing.Optional[list] = None


@dataclass
class AttackConfig:
    kind: str = "none"
    trigger: str = "badnet"
    target_class: int = 0
    ratio: float = 0.2
    n_compromised: int = 2
    client_ratio: float = 0.5
    patch: int = 2
    blend_alpha: float = 0.2
    blend_seed: int = 1234
    sig_amplitude: float = 0.15
    sig_frequency: float = 6.0


@dataclass
class DefenseConfig:
    kind: str = "none"
    lambda0: float = 1.0
    alpha: float = 1.1
    delta_pi: float = 0.10
    bound_iters: int = 5
    lr_bounds: float = 5e-4
    bound_init: str = "constant"
    bound_init_value: float = 50.0
    bound_margin: float = 1.5
    # where the next round's bound descent starts: last iterate or last deployed bounds
    warm_start: str = "iterate"
    norm_m: float = 1.0
    dp_sigma: float = 0.001
    krum_f: int = 1
    prune_p: float = 0.2


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    fl: FLConfig = field(default_factory=FLConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def config_hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with section fields overridden, e.g. ``replace(defense={"kind": "dp"})``."""
        raw = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict):
                raw[key].update(value)
            else:
                raw[key] = value
        return from_dict(raw)


class ConfigValidationError(ConfigError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


def _load_section(cls, raw, path, problems):
    if not isinstance(raw, dict):
        problems.append(f"{path}: expected an object")
        return cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in names:
            problems.append(f"{path}.{key}: unknown field" if path else f"{key}: unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        value = raw[f.name]
        hint = hints[f.name]
        where = f"{path}.{f.name}" if path else f.name
        if dataclasses.is_dataclass(hint):
            kwargs[f.name] = _load_section(hint, value, where, problems)
        elif hint is int:
            if isinstance(value, bool) or not isinstance(value, int):
                problems.append(f"{where}: expected an integer, got {value!r}")
            else:
                kwargs[f.name] = value
        elif hint is float:
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                problems.append(f"{where}: expected a number, got {value!r}")
            else:
                kwargs[f.name] = float(value)
        elif hint is str:
            if not isinstance(value, str):
                problems.append(f"{where}: expected a string, got {value!r}")
            else:
                kwargs[f.name] = value
        else:
            kwargs[f.name] = value
    return cls(**kwargs)


def _check_choice(problems, where, value, choices):
    if value not in choices:
        problems.append(f"{where}: {value!r} not one of {list(choices)}")


def validate(cfg: ExperimentConfig) -> list[str]:
    p: list[str] = []
    d, fl, m, a, df = cfg.data, cfg.fl, cfg.model, cfg.attack, cfg.defense
    if d.n_classes < 2:
        p.append("data.n_classes: must be >= 2")
    for name in ("per_class", "test_per_class", "syn_per_class", "grid"):
        if getattr(d, name) < 1:
            p.append(f"data.{name}: must be >= 1")
    if not 0 < d.client_test_fraction <= 1:
        p.append("data.client_test_fraction: must lie in (0, 1]")
    if d.noise < 0 or d.syn_noise < 0:
        p.append("data.noise/syn_noise: must be >= 0")
    _check_choice(p, "partition.mode", cfg.partition.mode, PARTITION_MODES)
    if not cfg.partition.beta > 0:
        p.append("partition.beta: must be > 0")
    _check_choice(p, "fl.mode", fl.mode, FL_MODES)
    if fl.n_clients < 1:
        p.append("fl.n_clients: must be >= 1")
    elif fl.n_clients > d.n_classes * d.per_class:
        p.append("fl.n_clients: more clients than training samples")
    if not 0 < fl.rho <= 1:
        p.append("fl.rho: must lie in (0, 1]")
    for name in ("rounds", "local_epochs", "distill_iters", "pretrain_epochs"):
        if getattr(fl, name) < 0:
            p.append(f"fl.{name}: must be >= 0")
    for name in ("batch", "distill_batch", "pretrain_batch"):
        if getattr(fl, name) < 1:
            p.append(f"fl.{name}: must be >= 1")
    for name in ("lr_local", "lr_distill", "lr_pretrain"):
        if not getattr(fl, name) > 0:
            p.append(f"fl.{name}: must be > 0")
    if not isinstance(m.prototypes, list) or not m.prototypes:
        p.append("model.prototypes: expected a non-empty list of hidden-width lists")
    else:
        for i, widths in enumerate(m.prototypes):
            if (
                not isinstance(widths, list)
                or not widths
                or not all(isinstance(w, int) and not isinstance(w, bool) and w > 0 for w in widths)
            ):
                p.append(f"model.prototypes[{i}]: expected a non-empty list of positive integers")
        if m.bounded_layers is not None:
            depth = min(len(w) for w in m.prototypes if isinstance(w, list)) if all(isinstance(w, list) for w in m.prototypes) else 0
            if not isinstance(m.bounded_layers, list) or not all(isinstance(l, int) and 1 <= l <= depth for l in m.bounded_layers):
                p.append(f"model.bounded_layers: expected hidden layer numbers in [1, {depth}]")
            elif not m.bounded_layers:
                p.append("model.bounded_layers: must not be empty")
    _check_choice(p, "attack.kind", a.kind, ATTACKS)
    _check_choice(p, "attack.trigger", a.trigger, TRIGGERS)
    if not 0 <= a.target_class < d.n_classes:
        p.append(f"attack.target_class: must lie in [0, {d.n_classes})")
    if not 0 <= a.ratio <= 1:
        p.append("attack.ratio: must lie in [0, 1]")
    if not 0 <= a.client_ratio <= 1:
        p.append("attack.client_ratio: must lie in [0, 1]")
    if not 0 <= a.n_compromised <= fl.n_clients:
        p.append("attack.n_compromised: must lie in [0, fl.n_clients]")
    if not 1 <= a.patch <= d.grid:
        p.append("attack.patch: must fit inside the image")
    _check_choice(p, "defense.kind", df.kind, DEFENSES)
    _check_choice(p, "defense.bound_init", df.bound_init, BOUND_INITS)
    _check_choice(p, "defense.warm_start", df.warm_start, WARM_STARTS)
    if not df.lambda0 > 0:
        p.append("defense.lambda0: must be > 0")
    if not df.alpha > 1:
        p.append("defense.alpha: must be > 1")
    if not 0 <= df.delta_pi <= 1:
        p.append("defense.delta_pi: must lie in [0, 1]")
    if df.bound_iters < 1:
        p.append("defense.bound_iters: must be >= 1")
    if not df.lr_bounds >= 0:
        p.append("defense.lr_bounds: must be >= 0")
    if not df.norm_m > 0:
        p.append("defense.norm_m: must be > 0")
    if df.dp_sigma < 0:
        p.append("defense.dp_sigma: must be >= 0")
    if df.krum_f < 0:
        p.append("defense.krum_f: must be >= 0")
    if not 0 <= df.prune_p < 1:
        p.append("defense.prune_p: must lie in [0, 1)")
    return p


def from_dict(raw: dict) -> ExperimentConfig:
    problems: list[str] = []
    cfg = _load_section(ExperimentConfig, raw, "", problems)
    # fields that failed to load keep their defaults, so validating the rest is still meaningful
    problems += validate(cfg)
    if problems:
        raise ConfigValidationError(problems)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigValidationError([f"<file>: invalid JSON ({exc})"]) from exc
    return from_dict(raw)


def desk_config(**sections) -> ExperimentConfig:
    """Small cross-silo scenario used by the acceptance suite and examples.

    Learning rates are raised from the defaults because 20 rounds of a few
    hundred samples barely move a model at 1e-3.
    """
    cfg = ExperimentConfig(
        fl=FLConfig(rounds=20, lr_local=0.05, lr_distill=0.01),
        defense=DefenseConfig(lr_bounds=0.05, bound_init="activation_max", warm_start="best"),
    )
    return cfg.replace(**sections) if sections else cfg
