"""Takeover arbitration: when the mentor holds control, execute whichever of
the mentor or physics action the value ensemble scores higher; otherwise the
agent acts. Also the cosine intervention cost and its first-step gating."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import Action, ConfigError, TakeoverSource
from .ensemble import EnsembleQ, q_mean_gap

ZERO_NORM = 1e-8


@dataclass
class TakeoverSignal:
    active: bool
    human_action: Optional[Action] = None

    def __post_init__(self):
        if self.active and self.human_action is None:
            raise ConfigError("active takeover signal must carry an action")


@dataclass
class ArbitrationResult:
    executed: Action
    source: TakeoverSource
    intervened: bool
    value_gap: float = 0.0  # mean ensemble gap when intervened, else 0


def arbitrate(
    obs: np.ndarray,
    world,
    a_av: Action,
    signal: TakeoverSignal,
    ens: Optional[EnsembleQ],
    phy: Callable[[object], Action],
    eps: float,
) -> ArbitrationResult:
    """No takeover: agent action passes through. Takeover: pick the mentor
    action iff its mean ensemble value beats the physics action by eps."""
    if not signal.active:
        return ArbitrationResult(a_av, TakeoverSource.NONE, False, 0.0)
    if ens is None:
        raise ConfigError("takeover arbitration requires a warmed-up ensemble")
    a_human = signal.human_action
    a_phy = phy(world)
    gap = q_mean_gap(ens, obs, a_human, a_phy)
    if gap >= eps:
        return ArbitrationResult(a_human, TakeoverSource.HUMAN, True, gap)
    return ArbitrationResult(a_phy, TakeoverSource.PHYSICS, True, gap)


def intervention_cost(a_av: Action, a_hybrid: Action) -> float:
    """1 - cosine similarity, in [0, 2]. A near-zero-norm action expresses no
    direction to penalise, so the cost is defined as 0 there."""
    av = a_av.as_array()
    hy = a_hybrid.as_array()
    na, nh = float(np.linalg.norm(av)), float(np.linalg.norm(hy))
    if na < ZERO_NORM or nh < ZERO_NORM:
        return 0.0
    if np.array_equal(av, hy):
        return 0.0
    if np.array_equal(av, -hy):
        return 2.0
    cos = float(np.dot(av, hy)) / (na * nh)
    cos = min(1.0, max(-1.0, cos))
    return 1.0 - cos


def first_step_gate(prev_intervened: bool, now_intervened: bool, cost: float) -> float:
    """Attribute the cost only on the rising edge of an intervention."""
    if now_intervened and not prev_intervened:
        return cost
    return 0.0
