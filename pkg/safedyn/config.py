"""
Configuration dataclasses, JSON loading with strict field checking, and config hashing.
"""
import dataclasses
import hashlib
import json
import logging
import typing
from dataclasses import dataclass, field

from .errors import ConfigError

logger = logging.getLogger(__name__)

OPTIMIZERS = ("lbsgd", "lagrangian")


@dataclass
class EnvConfig:
    """
    PointHazard task settings.

    `budget` is the per-episode cost budget d at `reference_horizon` steps; the runtime budget
    is prorated to `horizon` (d_scaled = d * horizon / reference_horizon).
    """
    horizon: int = 200
    budget: float = 25.0
    reference_horizon: int = 1000
    beta: float = 0.9
    dt: float = 0.1
    noise_std: float = 0.01
    layout: typing.Optional[str] = None
    layout_seed: int = 0
    n_hazards: int = 8
    hazard_radius: float = 0.4
    half_width: float = 2.0

    def __post_init__(self):
        if self.horizon < 1 or self.reference_horizon < 1:
            raise ConfigError("env.horizon and env.reference_horizon must be >= 1")
        if self.budget < 0:
            raise ConfigError("env.budget must be >= 0")

    @property
    def scaled_budget(self):
        return self.budget * self.horizon / self.reference_horizon


@dataclass
class FitConfig:
    """Ensemble architecture and training schedule."""
    members: int = 5
    hidden: int = 64
    epochs: int = 10
    steps_per_epoch: int = 40
    batch_size: int = 128
    learning_rate: float = 1e-3
    min_transitions: int = 100
    warm_start: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ("members", "hidden", "epochs", "steps_per_epoch", "batch_size", "min_transitions"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("model.learning_rate must be > 0")


@dataclass
class PolicyConfig:
    hidden: int = 32
    init_log_std: float = -1.0


@dataclass
class BarrierConfig:
    eta0: float = 0.1
    eta_decay: float = 0.97
    eta_min: float = 1e-3
    learning_rate: float = 0.05
    max_backtracks: int = 10
    curvature_init: float = 1.0
    curvature_ema: float = 0.9

    def __post_init__(self):
        if self.eta0 <= 0 or self.eta_min <= 0:
            raise ConfigError("barrier.eta0 and barrier.eta_min must be > 0")
        if not 0 < self.eta_decay <= 1:
            raise ConfigError("barrier.eta_decay must be in (0, 1]")


@dataclass
class LagrangianConfig:
    multiplier0: float = 0.0
    penalty0: float = 1.0
    multiplier_lr: float = 0.05
    penalty_growth: float = 1.5
    penalty_max: float = 1e4
    learning_rate: float = 0.05
    patience: int = 2

    def __post_init__(self):
        if self.multiplier0 < 0 or self.penalty0 <= 0:
            raise ConfigError("lagrangian.multiplier0 must be >= 0 and lagrangian.penalty0 > 0")


@dataclass
class TrainConfig:
    """
    Full training run configuration.

    Attributes:
        epochs (int): Training epochs; epoch 1 only collects data and fits the ensemble.
        episodes_per_epoch (int): Real-environment episodes collected per epoch.
        updates_per_epoch (int): Policy update steps per epoch.
        batch_size (int): Number of imagined start states per update.
        horizon (int): Imagination horizon H.
        optimizer (str): "lbsgd" or "lagrangian".
        eval_episodes (int): Evaluation episodes per epoch.
        seed (int): Root seed of the run.
    """
    epochs: int = 50
    episodes_per_epoch: int = 2
    updates_per_epoch: int = 20
    batch_size: int = 64
    horizon: int = 15
    optimizer: str = "lbsgd"
    eval_episodes: int = 10
    seed: int = 0
    buffer_capacity: int = 100_000
    env: EnvConfig = field(default_factory=EnvConfig)
    model: FitConfig = field(default_factory=FitConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    barrier: BarrierConfig = field(default_factory=BarrierConfig)
    lagrangian: LagrangianConfig = field(default_factory=LagrangianConfig)

    def __post_init__(self):
        for name in ("epochs", "episodes_per_epoch", "updates_per_epoch", "batch_size", "horizon",
                     "eval_episodes", "buffer_capacity"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


def from_dict(cls, data, prefix=""):
    """
    Builds a (nested) config dataclass from plain data.

    Raises:
        ConfigError: On unknown keys (the message names the full key path) or invalid values.
    """
    if not isinstance(data, dict):
        raise ConfigError(f"config section {prefix or '<root>'} must be a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config field '{prefix}{key}'")
        if dataclasses.is_dataclass(hints[key]):
            value = from_dict(hints[key], value, prefix=f"{prefix}{key}.")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"invalid config section {prefix or '<root>'}: {e}") from e


def to_dict(config):
    return dataclasses.asdict(config)


def load_config(filename, cls=TrainConfig):
    """
    Loads a JSON config file.

    Args:
        filename (str): Path to the JSON file.
        cls (type, optional): Config dataclass to build. Defaults to TrainConfig.

    Raises:
        ConfigError: If the file is missing, not valid JSON, or has unknown fields.
    """
    logger.debug(f"Loading config from {filename}")
    try:
        with open(filename, "r") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {filename}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {filename} is not valid JSON: {e}") from e
    return from_dict(cls, data)


def save_config(config, filename):
    with open(filename, "w") as f:
        json.dump(to_dict(config), f, indent=2, sort_keys=True)
        f.write("\n")


def config_hash(config):
    """sha256 over the canonical JSON of every field; changes iff some field changes."""
    canonical = json.dumps(to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def with_overrides(config, overrides):
    """Returns a copy of `config` with a nested dict of overrides applied (strictly checked)."""
    merged = to_dict(config)

    def _merge(base, extra, prefix):
        for key, value in extra.items():
            if key not in base:
                raise ConfigError(f"unknown config field '{prefix}{key}'")
            if isinstance(base[key], dict) and isinstance(value, dict):
                _merge(base[key], value, f"{prefix}{key}.")
            else:
                base[key] = value

    _merge(merged, overrides, "")
    return from_dict(type(config), merged)
