"""mentordrive: a 2D driving simulator with interpretable physics policies,
value-arbitrated mentor interventions, and a reward-free intervention trainer."""

from .core import (
    Action,
    ConfigError,
    InvalidInputError,
    RunConfig,
    RngHandle,
    TakeoverSource,
    Transition,
    Vec2,
    VehicleKind,
    VehicleState,
    seed_all,
)

__all__ = [
    "Action",
    "ConfigError",
    "InvalidInputError",
    "RunConfig",
    "RngHandle",
    "TakeoverSource",
    "Transition",
    "Vec2",
    "VehicleKind",
    "VehicleState",
    "seed_all",
]

__version__ = "0.1.0"
