"""Interpretable physics policies: IDM longitudinal control and MOBIL lane
changes, plus the mapping from model outputs to continuous [-1, 1] actions.

Lane-change reasoning (incentive and safety) considers vehicles only;
longitudinal braking reacts to any blocking object, including static
obstacles. A purely physics-driven ego therefore brakes behind a roadblock
instead of steering around it, the documented failure mode of the rule-based
baseline. The synthetic oracle mentor layers an obstacle-aware lane-change
override on top of the same machinery (`obstacle_aware=True`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, NamedTuple, Optional

from .core import Action, InvalidInputError

if TYPE_CHECKING:  # pragma: no cover
    from .world import WorldState

B_EMERGENCY = 10.0  # hard deceleration clamp, m/s^2
MAX_WHEEL_ANGLE_RAD = math.radians(40.0)


@dataclass(frozen=True)
class IdmParams:
    a_max: float = 2.0  # maximum acceleration, m/s^2
    v0: float = 22.0  # desired free-flow speed, m/s
    eta: float = 4.0  # velocity exponent
    s0: float = 10.0  # standstill distance, m
    T: float = 1.5  # safe time headway, s
    b_comf: float = 5.0  # magnitude of comfortable braking, m/s^2

    def __post_init__(self):
        for name in ("a_max", "v0", "eta", "s0", "T", "b_comf"):
            if getattr(self, name) <= 0:
                raise InvalidInputError(f"IdmParams.{name} must be positive")


@dataclass(frozen=True)
class MobilParams:
    politeness: float = 0.1
    delta_a_threshold: float = 0.2  # m/s^2
    b_safe: float = 2.0  # max deceleration imposed on the new follower, m/s^2
    lane_change_time_gap: float = 1.0  # s, time to traverse one lane width

    def __post_init__(self):
        if not (0.0 <= self.politeness <= 1.0):
            raise InvalidInputError("politeness must be in [0,1]")
        if self.delta_a_threshold <= 0 or self.b_safe <= 0 or self.lane_change_time_gap <= 0:
            raise InvalidInputError("MOBIL thresholds must be positive")


def idm_accel(v: float, dv: float, gap: float, p: IdmParams) -> float:
    """Longitudinal acceleration for speed v, closing speed dv = v - v_lead,
    and bumper-to-bumper gap. No leader is gap = +inf with dv = 0."""
    if not (math.isfinite(v) and math.isfinite(dv)):
        raise InvalidInputError(f"non-finite idm inputs v={v} dv={dv}")
    if math.isnan(gap):
        raise InvalidInputError("gap is NaN")
    if gap <= 0:
        raise InvalidInputError(f"gap must be positive, got {gap}")
    if math.isinf(gap):
        interaction = 0.0
    else:
        s_star = p.s0 + max(0.0, v * p.T + v * dv / (2.0 * math.sqrt(p.a_max * p.b_comf)))
        interaction = (s_star / gap) ** 2
    a = p.a_max * (1.0 - (v / p.v0) ** p.eta - interaction)
    return min(p.a_max, max(-B_EMERGENCY, a))


def mobil_should_change(
    ego_gain: float,
    new_follower_delta: float,
    old_follower_delta: float,
    new_follower_decel: float,
    p: MobilParams,
) -> bool:
    """Lane-change decision: safety first (anticipated new-follower
    acceleration no worse than -b_safe), then the politeness-weighted
    incentive must clear the threshold."""
    for name, x in (
        ("ego_gain", ego_gain),
        ("new_follower_delta", new_follower_delta),
        ("old_follower_delta", old_follower_delta),
        ("new_follower_decel", new_follower_decel),
    ):
        if not math.isfinite(x):
            raise InvalidInputError(f"non-finite {name}={x}")
    if new_follower_decel < -p.b_safe:
        return False
    incentive = ego_gain + p.politeness * (new_follower_delta + old_follower_delta)
    return incentive > p.delta_a_threshold


def accel_to_throttle(a_cmd: float, p: IdmParams) -> float:
    """Invert the simulator's asymmetric throttle map so the executed
    acceleration matches the commanded one."""
    if a_cmd >= 0.0:
        t = a_cmd / p.a_max
    else:
        t = a_cmd / B_EMERGENCY
    return min(1.0, max(-1.0, t))


@dataclass(frozen=True)
class LateralGains:
    """PD tracker on (lateral offset to target lane centre, heading error).
    Positive steer output steers right; positive lateral error means the
    vehicle sits left of the target centreline."""

    k_offset: float = 0.30  # steer per metre of lateral error
    k_heading: float = 1.50  # steer per radian of heading error
    k_yaw: float = 0.05  # damping, steer per rad/s of yaw rate


def lateral_steer(offset_left: float, heading_left: float, yaw_rate: float, g: LateralGains) -> float:
    """offset_left > 0: vehicle left of target centre. heading_left > 0: nose
    points left of the lane tangent. Both call for steering right (positive
    action; negative steer means left)."""
    raw = g.k_offset * offset_left + g.k_heading * heading_left + g.k_yaw * yaw_rate
    return min(1.0, max(-1.0, raw))


class NeighborObs(NamedTuple):
    """Bumper-to-bumper measurement to a neighbouring object."""

    gap: float
    speed: float


class FollowerObs(NamedTuple):
    """The nearest vehicle behind the ego in some lane, with its own current
    (vehicles-only) leader measured from the follower's front bumper."""

    gap_to_ego: float
    speed: float
    leader_gap: float  # +inf when the follower has no vehicle ahead
    leader_speed: float


@dataclass
class PhysicsDecision:
    action: Action
    target_lane: int
    lane_change: bool
    degraded: bool  # off-road fallback engaged


def _accel_toward(speed: float, lead: Optional[NeighborObs], idm: IdmParams) -> float:
    if lead is None:
        return idm_accel(speed, 0.0, math.inf, idm)
    if lead.gap <= 0:
        return -B_EMERGENCY
    return idm_accel(speed, speed - lead.speed, lead.gap, idm)


def decide(
    view,
    idm: IdmParams,
    mobil: MobilParams,
    gains: LateralGains,
    obstacle_aware: bool = False,
) -> PhysicsDecision:
    """Steering/throttle decision from a `LaneView` of the world (see
    world.LaneView for the measurement contract). Deterministic in the view."""
    if view.off_road:
        return PhysicsDecision(Action(0.0, -1.0), view.ego_lane, False, True)

    current = view.ego_lane
    target = current

    # longitudinal command against any blocking object in the current lane
    a_cmd = _accel_toward(view.ego_speed, view.leader(current, vehicles_only=False), idm)

    # discretionary MOBIL change. The plain baseline reasons over vehicles
    # only; the obstacle-aware variant folds static blockers into the
    # incentive so it cannot steer toward an obstructed lane.
    veh_only = not obstacle_aware
    a_here = _accel_toward(view.ego_speed, view.leader(current, vehicles_only=veh_only), idm)
    old_fol = view.follower(current)
    if old_fol is None:
        old_delta = 0.0
    else:
        # ego leaving: the old follower inherits the ego's current-lane leader
        here_lead = view.leader(current, vehicles_only=True)
        if here_lead is None:
            inherited = None
        else:
            inherited = NeighborObs(old_fol.gap_to_ego + view.ego_length + here_lead.gap, here_lead.speed)
        now = idm_accel(old_fol.speed, old_fol.speed - view.ego_speed, max(old_fol.gap_to_ego, 0.1), idm)
        old_delta = _accel_toward(old_fol.speed, inherited, idm) - now

    best_incentive = None
    for lane in view.adjacent_lanes(current):
        if not view.lane_open(lane):
            continue
        ego_gain = _accel_toward(view.ego_speed, view.leader(lane, vehicles_only=veh_only), idm) - a_here
        new_fol = view.follower(lane)
        if new_fol is None:
            new_delta, new_decel = 0.0, 0.0
        else:
            now = _accel_toward(new_fol.speed, NeighborObs(new_fol.leader_gap, new_fol.leader_speed)
                                if math.isfinite(new_fol.leader_gap) else None, idm)
            anticipated = idm_accel(
                new_fol.speed, new_fol.speed - view.ego_speed, max(new_fol.gap_to_ego, 0.1), idm
            )
            new_delta, new_decel = anticipated - now, anticipated
        if mobil_should_change(ego_gain, new_delta, old_delta, new_decel, mobil):
            incentive = ego_gain + mobil.politeness * (new_delta + old_delta)
            if best_incentive is None or incentive > best_incentive:
                best_incentive = incentive
                target = lane

    # obstacle-aware override: steer around a static blockage the traffic
    # model is blind to (mentor behaviour, not part of the plain baseline).
    # Plans one lane step toward the least-obstructed lane; when the crossing
    # window is still too tight for the current speed it brakes firmly and
    # threads through at crawl rather than creeping into the pocket.
    squeeze = False
    if obstacle_aware and target == current:
        blocked_at = view.static_blocker(current)
        if blocked_at is not None and blocked_at <= view.obstacle_lookahead:
            desired = view.plan_next_lane()
            if desired != current:
                crawling = view.ego_speed < 1.0
                squeeze = crawling
                need = 6.0 if crawling else view.ego_speed * 1.5 + 6.0
                gap_there = view.static_blocker(desired)
                gap_there = math.inf if gap_there is None else gap_there
                if view.lane_clear_for_merge(desired, tight=crawling) and gap_there > need:
                    target = desired
                    if crawling:
                        # squeeze mode: a stationary bicycle cannot steer and
                        # IDM will not enter a pocket shorter than s0, so
                        # creep under a hard clearance guard instead
                        if view.frontal_clearance((current, desired)) > 1.2 and view.ego_speed < 2.0:
                            a_cmd = 0.8
                        elif view.frontal_clearance((current, desired)) <= 1.2:
                            a_cmd = -B_EMERGENCY
                        else:
                            a_cmd = 0.0
                    else:
                        a_target = _accel_toward(
                            view.ego_speed, view.leader(target, vehicles_only=False), idm
                        )
                        # respect the old lane's blocker until the body has
                        # mostly left it, so the swerve cannot clip a corner
                        if abs(view.offset_left_of(target)) > 0.6 * view.lane_width:
                            a_cmd = min(a_cmd, a_target)
                        else:
                            a_cmd = a_target
                else:
                    # hold back for the crossing window instead of creeping
                    # into the pocket and sealing it
                    a_cmd = min(a_cmd, -idm.b_comf)

    steer = lateral_steer(view.offset_left_of(target), view.heading_left, view.yaw_rate, gains)
    if squeeze:
        # cap the swing so the nose cannot wind up against the pocket wall
        steer = min(0.6, max(-0.6, steer))
    throttle = accel_to_throttle(a_cmd, idm)
    return PhysicsDecision(Action(steer, throttle), target, target != current, False)


def physics_policy(
    world: "WorldState",
    ego_id: Optional[int] = None,
    idm: Optional[IdmParams] = None,
    mobil: Optional[MobilParams] = None,
    gains: Optional[LateralGains] = None,
) -> Action:
    """Physics-based ego action for the current world. Off-road ego degrades
    to maximal straight-line braking."""
    idm = idm or IdmParams()
    mobil = mobil or MobilParams()
    gains = gains or LateralGains()
    return decide(world.lane_view(), idm, mobil, gains, obstacle_aware=False).action
