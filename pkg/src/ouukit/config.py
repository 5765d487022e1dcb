"""Experiment configuration: JSON schema, validation, presets.

Configs are plain nested dataclasses loaded from UTF-8 JSON. Unknown
keys are rejected at every level so a typo cannot silently fall back to
a default. Two presets ship: "desk" (32x32 mesh, 25 controls) sized so
the full comparison runs on a workstation, and "paper" (64x64 mesh,
49 controls) matching the published problem dimensions.
"""

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .util import hash_of


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MeshConfig:
    nx: int = 32
    ny: int = 32


@dataclass(frozen=True)
class MaternConfig:
    gamma: float = 0.1
    delta: float = 5.0
    mean: float = -1.0


@dataclass(frozen=True)
class SourceConfig:
    grid: int = 5
    sigma: float = 0.08


@dataclass(frozen=True)
class BoundsConfig:
    lo: float = -4.0
    hi: float = 4.0


@dataclass(frozen=True)
class RankConfig:
    r_m: int = 50
    r_u: int = 100
    n_pod: int = 256


@dataclass(frozen=True)
class NetworkConfig:
    hidden: tuple = (200, 200)
    activation: str = "tanh"


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 1600
    batch_size: int = 32
    lr: float = 1e-3
    lr_drop_factor: float = 0.25
    lr_drop_epoch: int = 800
    jacobian_weight: float = 1.0


@dataclass(frozen=True)
class RiskConfig:
    kind: str = "cvar"
    beta: float = 0.95
    eps: float = 1e-4


@dataclass(frozen=True)
class SAAConfig:
    n_train: int = 256
    n_optimize: int = 1024
    n_eval: int = 2048
    n_ref: int = 256


@dataclass(frozen=True)
class TargetConfig:
    kind: str = "sinusoidal"   # sinusoidal | quadratic | custom
    path: str = None           # nodal values (.npy) for kind == custom


@dataclass(frozen=True)
class ExperimentConfig:
    mesh: MeshConfig = field(default_factory=MeshConfig)
    matern: MaternConfig = field(default_factory=MaternConfig)
    reaction: float = 0.1
    sources: SourceConfig = field(default_factory=SourceConfig)
    bounds: BoundsConfig = field(default_factory=BoundsConfig)
    ranks: RankConfig = field(default_factory=RankConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    risk: RiskConfig = field(default_factory=RiskConfig)
    saa: SAAConfig = field(default_factory=SAAConfig)
    target: TargetConfig = field(default_factory=TargetConfig)
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        d = (self.mesh.nx + 1) * (self.mesh.ny + 1)
        if self.mesh.nx < 2 or self.mesh.ny < 2:
            raise ConfigError("mesh must have at least 2 cells per axis")
        if self.matern.gamma <= 0 or self.matern.delta <= 0:
            raise ConfigError("matern gamma/delta must be positive")
        if self.reaction < 0:
            raise ConfigError("reaction coefficient must be nonnegative")
        if self.sources.grid < 1 or self.sources.sigma <= 0:
            raise ConfigError("invalid source grid/sigma")
        if not self.bounds.lo < self.bounds.hi:
            raise ConfigError("bounds must satisfy lo < hi")
        if not 1 <= self.ranks.r_m <= d:
            raise ConfigError(f"r_m must be in [1, {d}]")
        if not 1 <= self.ranks.r_u <= d:
            raise ConfigError(f"r_u must be in [1, {d}]")
        if self.ranks.n_pod < self.ranks.r_u:
            raise ConfigError("n_pod must be >= r_u")
        if self.network.activation not in ("tanh", "softplus", "sigmoid", "softmax"):
            raise ConfigError(f"unknown activation {self.network.activation!r}")
        if self.training.epochs < 1 or self.training.batch_size < 1:
            raise ConfigError("invalid training schedule")
        if self.training.jacobian_weight < 0:
            raise ConfigError("jacobian weight must be >= 0")
        if self.risk.kind not in ("mean", "cvar"):
            raise ConfigError(f"unknown risk kind {self.risk.kind!r}")
        if not 0.0 <= self.risk.beta < 1.0:
            raise ConfigError("beta must be in [0, 1)")
        if self.risk.eps <= 0:
            raise ConfigError("eps must be positive")
        if min(self.saa.n_train, self.saa.n_optimize, self.saa.n_eval, self.saa.n_ref) < 1:
            raise ConfigError("sample sizes must be positive")
        if self.target.kind not in ("sinusoidal", "quadratic", "custom"):
            raise ConfigError(f"unknown target kind {self.target.kind!r}")
        if self.target.kind == "custom" and not self.target.path:
            raise ConfigError("custom target needs a path")
        return self

    @property
    def d_z(self) -> int:
        return self.sources.grid ** 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return hash_of(self.to_dict())

    def target_values(self, mesh) -> np.ndarray:
        x1, x2 = mesh.node_coords[:, 0], mesh.node_coords[:, 1]
        if self.target.kind == "sinusoidal":
            return np.sin(2.0 * np.pi * x1) * np.sin(2.0 * np.pi * x2)
        if self.target.kind == "quadratic":
            return 4.0 * x2 * (1.0 - x2)
        values = np.load(self.target.path)
        if values.shape != (mesh.d,):
            raise ConfigError(
                f"custom target has {values.shape} values, mesh needs {mesh.d}"
            )
        return np.asarray(values, dtype=float)


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        ftype = fields[name].type
        if dataclasses.is_dataclass(_resolve(ftype)):
            kwargs[name] = _build(_resolve(ftype), value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_TYPES = {c.__name__: c for c in (
    MeshConfig, MaternConfig, SourceConfig, BoundsConfig, RankConfig,
    NetworkConfig, TrainingConfig, RiskConfig, SAAConfig, TargetConfig,
)}


def _resolve(ftype):
    if isinstance(ftype, str):
        return _TYPES.get(ftype, ftype)
    return ftype


def from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "config").validate()


def load_config(path_or_preset: str) -> ExperimentConfig:
    if path_or_preset in PRESETS:
        return PRESETS[path_or_preset]()
    with open(path_or_preset, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path_or_preset}: {exc}") from exc
    return from_dict(data)


def desk_config(**overrides) -> ExperimentConfig:
    return dataclasses.replace(ExperimentConfig(), **overrides).validate()


def paper_config(**overrides) -> ExperimentConfig:
    cfg = ExperimentConfig(
        mesh=MeshConfig(nx=64, ny=64),
        sources=SourceConfig(grid=7, sigma=0.08),
        ranks=RankConfig(r_m=100, r_u=300, n_pod=512),
        network=NetworkConfig(hidden=(400, 400)),
        saa=SAAConfig(n_train=1024, n_optimize=2048, n_eval=8192, n_ref=4096),
    )
    return dataclasses.replace(cfg, **overrides).validate()


PRESETS = {"desk": desk_config, "paper": paper_config}
