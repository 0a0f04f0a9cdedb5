"""Strict JSON pipeline configuration.

Every block has documented defaults; unknown keys and ill-typed values are
errors that name the key (and its line in the file when known). ``seed`` is
mandatory: every random stream in a run derives from it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PhysicsConfig:
    """Contaminant model: grid, time horizon, transport/reaction and cost parameters."""

    grid_n: int = 40  # nodes per direction
    final_time: float = 0.4
    n_steps: int = 200
    kappa: float = 0.1  # diffusivity of both species
    rho: float = 2.0  # reaction rate
    gamma: float = 1e-5  # control cost weight
    xi_train: tuple[float, ...] = (1.0, 1.0, 10.0, 75.0)
    xi_test: tuple[float, ...] = (1.5, 1.5, 8.0, 50.0)
    initial_amplitude: float = 1000.0

    def validate(self):
        _positive(self, "grid_n", "final_time", "n_steps", "kappa", "gamma", "initial_amplitude")
        for name in ("xi_train", "xi_test"):
            if len(getattr(self, name)) != 4:
                raise ConfigError(f"physics.{name} needs 4 values")


@dataclass(frozen=True)
class RomConfig:
    """Training controls and operator-inference settings."""

    n_training_controls: int = 5
    control_nodes: int = 100
    energy_tol: float = 1e-5
    lambda_grid: tuple[tuple[float, ...], ...] = tuple((a, b) for a in (1e-2, 0.1, 1.0) for b in (1.0, 10.0, 100.0))

    def validate(self):
        _positive(self, "n_training_controls", "control_nodes")
        if not 0 < self.energy_tol < 1:
            raise ConfigError("rom.energy_tol must lie in (0, 1)")
        if not self.lambda_grid or any(len(p) != 2 or min(p) < 0 for p in self.lambda_grid):
            raise ConfigError("rom.lambda_grid must be a non-empty list of non-negative pairs")


@dataclass(frozen=True)
class OptimizationConfig:
    z0: float = 2.0  # constant initial control (contaminant)
    ignition_start: tuple[float, ...] = (1800.0, 1800.0)  # initial ignition guess (fire)
    gtol: typing.Optional[float] = None  # default: 1e-8 (1 + |J(z0)|)
    max_iter: int = 100

    def validate(self):
        _positive(self, "max_iter")
        if len(self.ignition_start) != 2:
            raise ConfigError("optimization.ignition_start needs 2 values")
        if self.gtol is not None and self.gtol <= 0:
            raise ConfigError("optimization.gtol must be positive")


@dataclass(frozen=True)
class HdsaConfig:
    n_fom: int = 1  # online high-fidelity evaluations
    fom_perturbation: float = 0.1  # relative size of the extra evaluation points when n_fom > 1
    n_tau: int = 11  # discrepancy time nodes (contaminant; fire uses the observation hours)
    retention_ratio: float = 1e-2
    alpha_p_factor: float = 1.0
    alpha_d_factor: float = 0.05
    length_scale: typing.Optional[float] = None  # fire slope-prior length (m); default spread distance
    n_samples: int = 100
    sample_seed: typing.Optional[int] = None  # defaults to the run seed

    def validate(self):
        _positive(self, "n_fom", "n_tau", "retention_ratio", "alpha_p_factor", "alpha_d_factor", "n_samples")
        if self.retention_ratio >= 1:
            raise ConfigError("hdsa.retention_ratio must be below 1")
        if self.fom_perturbation < 0:
            raise ConfigError("hdsa.fom_perturbation must be non-negative")


@dataclass(frozen=True)
class FireConfig:
    wind_train: tuple[float, ...] = (0.1, 0.1)
    wind_test: tuple[float, ...] = (4.33, 2.5)
    base_rate: float = 0.02
    fuel_map: typing.Optional[str] = None  # container file with a ``fuel`` block
    horizon: int = 8
    n_obs: int = 7
    n_train: int = 15
    n_validation: int = 5
    n_test: int = 5
    train_box: tuple[float, ...] = (900.0, 900.0, 2700.0, 2700.0)  # x0, y0, x1, y1
    test_box: tuple[float, ...] = (900.0, 900.0, 1500.0, 1500.0)

    def validate(self):
        _positive(self, "base_rate", "horizon", "n_obs", "n_train", "n_test")
        for name in ("wind_train", "wind_test"):
            if len(getattr(self, name)) != 2:
                raise ConfigError(f"fire.{name} needs 2 values")
        for name in ("train_box", "test_box"):
            b = getattr(self, name)
            if len(b) != 4 or b[0] >= b[2] or b[1] >= b[3]:
                raise ConfigError(f"fire.{name} must be [x0, y0, x1, y1] with x0 < x1, y0 < y1")
        if self.n_validation < 0:
            raise ConfigError("fire.n_validation must be non-negative")


@dataclass(frozen=True)
class FlowmapConfig:
    epochs: int = 1000
    lr_start: float = 4e-3
    lr_end: float = 1e-3
    P: int = 3
    batch_size: typing.Optional[int] = None
    hidden_width: int = 64
    hidden_layers: int = 4
    pod_tol: float = 0.01

    def validate(self):
        _positive(self, "epochs", "lr_end", "P", "hidden_width")
        if self.lr_start < self.lr_end:
            raise ConfigError("flowmap.lr_start must be at least lr_end")
        if not 0 < self.pod_tol < 1:
            raise ConfigError("flowmap.pod_tol must lie in (0, 1)")


SCENARIOS = ("contaminant", "fire")


@dataclass(frozen=True)
class PipelineConfig:
    scenario: str
    seed: int
    output_dir: str = "romopt-run"
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    rom: RomConfig = field(default_factory=RomConfig)
    optimization: OptimizationConfig = field(default_factory=OptimizationConfig)
    hdsa: HdsaConfig = field(default_factory=HdsaConfig)
    fire: FireConfig = field(default_factory=FireConfig)
    flowmap: FlowmapConfig = field(default_factory=FlowmapConfig)

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        for f in dataclasses.fields(self):
            block = getattr(self, f.name)
            if dataclasses.is_dataclass(block):
                block.validate()

    @property
    def sample_seed(self) -> int:
        return self.seed if self.hdsa.sample_seed is None else self.hdsa.sample_seed

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def block_hash(self, *names: str) -> str:
        """Digest of the selected top-level entries (all of them when none are named)."""
        d = self.to_dict()
        sel = d if not names else {k: d[k] for k in names}
        return hashlib.sha256(json.dumps(sel, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# -- parsing ----------------------------------------------------------------------------


def _positive(obj, *names):
    block = type(obj).__name__.replace("Config", "").lower()
    for n in names:
        if not getattr(obj, n) > 0:
            raise ConfigError(f"{block}.{n} must be positive")


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _line_of(text: str | None, key: str) -> int | None:
    if not text:
        return None
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _where(path: str, text, key) -> str:
    line = _line_of(text, key)
    return f"'{path}'" + (f" (line {line})" if line else "")


def _coerce(tp, value, path, text, key):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    bad = ConfigError(f"invalid value {value!r} for key {_where(path, text, key)}: expected {_type_name(tp)}")
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(inner, value, path, text, key)
    if tp is bool:
        if not isinstance(value, bool):
            raise bad
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise bad
        return value
    if origin is tuple:
        if not isinstance(value, list):
            raise bad
        return tuple(_coerce(args[0], v, f"{path}[{i}]", text, key) for i, v in enumerate(value))
    raise TypeError(f"unsupported config type {tp}")


def _type_name(tp) -> str:
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        return " or ".join(_type_name(a) for a in typing.get_args(tp))
    if origin is tuple:
        return f"list of {_type_name(typing.get_args(tp)[0])}"
    return "null" if tp is type(None) else tp.__name__


def _build(cls, data, prefix: str, text):
    if not isinstance(data, dict):
        raise ConfigError(f"'{prefix or 'config'}' must be a JSON object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            raise ConfigError(f"unknown key {_where(prefix + key, text, key)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        path = prefix + f.name
        if f.name not in data:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ConfigError(f"missing required key '{path}'")
            continue
        tp = hints[f.name]
        if dataclasses.is_dataclass(tp):
            kwargs[f.name] = _build(tp, data[f.name], path + ".", text)
        else:
            kwargs[f.name] = _coerce(tp, data[f.name], path, text, f.name)
    return cls(**kwargs)


def parse_config_dict(data: dict, text: str | None = None) -> PipelineConfig:
    cfg = _build(PipelineConfig, data, "", text)
    cfg.validate()
    return cfg


def parse_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return parse_config_dict(data, text)
