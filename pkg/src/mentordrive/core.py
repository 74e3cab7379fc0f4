"""Shared domain types, run configuration, and deterministic RNG seeding.

Observation layout (259 entries, all clamped to [0, 1]):

  ego block, 9 entries
    0  current steering position (last commanded steer, signed -> [0,1])
    1  heading relative to lane tangent, over [-pi, pi] -> [0,1]
    2  speed / v_max
    3  distance from vehicle centre to left road boundary / road width
    4  distance from vehicle centre to right road boundary / road width
    5  last action steer  (signed -> [0,1])
    6  last action throttle (signed -> [0,1])
    7  yaw rate over [-YAW_RATE_MAX, YAW_RATE_MAX] -> [0,1]
    8  off-road flag (0 or 1)

  navigation block, 10 entries (two upcoming checkpoints, 5 each)
    +0 forward offset in ego frame over [-NAV_RANGE, NAV_RANGE] -> [0,1]
    +1 lateral offset in ego frame over [-NAV_RANGE, NAV_RANGE] -> [0,1]
    +2 sin of route heading at checkpoint relative to ego -> [0,1]
    +3 cos of route heading at checkpoint relative to ego -> [0,1]
    +4 euclidean distance / NAV_RANGE

  lidar block, 240 entries
    ray k points at ego heading + 2*pi*k/240 (counter-clockwise);
    entry = min(hit distance, LIDAR_RANGE) / LIDAR_RANGE, 1.0 = no hit.

Signed quantities x in [-m, m] are stored as (x/m + 1)/2.
"""

from __future__ import annotations

import enum
import hashlib
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np
import yaml

EGO_DIM = 9
NAV_DIM = 10
LIDAR_DIM = 240
OBS_DIM = EGO_DIM + NAV_DIM + LIDAR_DIM

LIDAR_RANGE = 50.0
NAV_RANGE = 100.0
YAW_RATE_MAX = 4.0

KMH_TO_MPS = 1.0 / 3.6


class ConfigError(ValueError):
    """Invalid configuration value or malformed config file."""


class InvalidInputError(ValueError):
    """Non-finite or out-of-contract numeric input."""


def unit_clamp(x: float) -> float:
    return 0.0 if x < 0.0 else (1.0 if x > 1.0 else x)


def signed_to_unit(x: float, magnitude: float) -> float:
    """Map x in [-magnitude, magnitude] to [0, 1], clamping."""
    return unit_clamp(0.5 * (x / magnitude + 1.0))


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


class VehicleKind(enum.Enum):
    EGO = "ego"
    CAR = "car"
    TRUCK = "truck"
    STATIC_OBSTACLE = "static_obstacle"


class TakeoverSource(enum.Enum):
    NONE = "none"
    HUMAN = "human"
    PHYSICS = "physics"


@dataclass
class Vec2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise InvalidInputError(f"non-finite Vec2 ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass
class VehicleState:
    position: Vec2
    heading: float
    velocity: float  # scalar speed, m/s, >= 0
    lane_index: int
    length: float
    width: float
    kind: VehicleKind

    def __post_init__(self):
        if self.velocity < 0:
            raise InvalidInputError(f"negative velocity {self.velocity}")
        if self.lane_index < 0:
            raise InvalidInputError(f"negative lane index {self.lane_index}")
        if self.length <= 0 or self.width <= 0:
            raise InvalidInputError("vehicle dimensions must be positive")


@dataclass(frozen=True)
class Action:
    steer: float
    throttle: float

    def __post_init__(self):
        if not (math.isfinite(self.steer) and math.isfinite(self.throttle)):
            raise InvalidInputError(f"non-finite action ({self.steer}, {self.throttle})")
        object.__setattr__(self, "steer", min(1.0, max(-1.0, self.steer)))
        object.__setattr__(self, "throttle", min(1.0, max(-1.0, self.throttle)))

    def as_array(self) -> np.ndarray:
        return np.array([self.steer, self.throttle], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "Action":
        return Action(float(a[0]), float(a[1]))


@dataclass
class Transition:
    """One replay record. Carries no environment reward or cost."""

    obs: np.ndarray
    action_av: Action
    action_hybrid: Action
    intervened: bool
    intervention_cost: float
    next_obs: np.ndarray
    done: bool
    takeover_source: TakeoverSource = TakeoverSource.NONE

    def __post_init__(self):
        if not self.intervened:
            if self.action_hybrid != self.action_av:
                raise InvalidInputError("non-intervened transition must execute the agent action")
            if self.intervention_cost != 0.0:
                raise InvalidInputError("non-intervened transition must carry zero cost")
            if self.takeover_source is not TakeoverSource.NONE:
                raise InvalidInputError("non-intervened transition must have source none")
        if self.intervention_cost < 0.0:
            raise InvalidInputError("intervention cost must be >= 0")


@dataclass
class RunConfig:
    """Training run parameters. Defaults follow the standard configuration table."""

    seed: int = 0
    gamma: float = 0.99
    tau: float = 0.005
    learning_rate: float = 1e-4
    horizon: int = 1000
    batch_size: int = 1024
    steps_before_learning: int = 100
    steps_per_iteration: int = 100
    cql_temperature: float = 10.0
    target_entropy: float = 2.0
    warmup_steps: int = 10000
    epsilon_select: float = 0.5
    psi: float = 1.0
    beta_weight: float = 1.0
    ensemble_size: int = 5
    c1: float = 1.0
    c2: float = 0.1
    r_destination: float = 20.0
    v_max: float = 80.0  # km/h
    # implementation knobs (documented defaults, not table values)
    hidden_sizes: tuple = (256, 256)
    buffer_capacity: int = 100_000
    twin_critics: bool = True
    # True reproduces the published TD form with the 1/2 inside the squared
    # bracket; its bootstrap factor is 2*gamma > 1, so the proxy values
    # diverge (demonstrated in tests). Default is the contractive form.
    half_td_target: bool = False
    warmup_noise_sigma: float = 0.1
    grad_clip_norm: float = 10.0
    checkpoint_every: int = 50

    def __post_init__(self):
        self.hidden_sizes = tuple(int(h) for h in self.hidden_sizes)
        self.validate()

    def validate(self):
        if not (0.0 < self.gamma < 1.0):
            raise ConfigError(f"gamma must be in (0,1), got {self.gamma}")
        if self.epsilon_select < 0.0:
            raise ConfigError(f"epsilon_select must be >= 0, got {self.epsilon_select}")
        if self.ensemble_size < 2:
            raise ConfigError(f"ensemble_size must be >= 2, got {self.ensemble_size}")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        for name in ("tau", "learning_rate", "horizon", "batch_size", "warmup_steps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    @property
    def v_max_mps(self) -> float:
        return self.v_max * KMH_TO_MPS

    def to_file(self, path):
        data = {}
        for f in fields(self):
            v = getattr(self, f.name)
            data[f.name] = list(v) if isinstance(v, tuple) else v
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(data, fh, sort_keys=True, default_flow_style=False)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a flat key-value document")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {unknown}")
        if "hidden_sizes" in data:
            data["hidden_sizes"] = tuple(data["hidden_sizes"])
        return cls(**data)

    def with_overrides(self, **kw) -> "RunConfig":
        return replace(self, **kw)

    def hash(self) -> str:
        payload = repr(sorted((f.name, getattr(self, f.name)) for f in fields(self)))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _stream_seed(seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class RngHandle:
    """Root of all randomness. Named child streams are independent and
    reproducible: the same (seed, name) always yields the same stream."""

    def __init__(self, seed: int):
        if seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        self.seed = int(seed)

    def stream(self, name: str) -> np.random.Generator:
        return np.random.Generator(np.random.PCG64(_stream_seed(self.seed, name)))

    def seed_for(self, name: str) -> int:
        return _stream_seed(self.seed, name)

    def spawn(self, name: str) -> "RngHandle":
        return RngHandle(_stream_seed(self.seed, name) >> 1)

    def __repr__(self):
        return f"RngHandle(seed={self.seed})"


def seed_all(seed: int) -> RngHandle:
    """Create the root RNG handle every stochastic component derives from."""
    return RngHandle(seed)
