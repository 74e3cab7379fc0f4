"""World state, procedural scenario generation, and the step function.

Terminal precedence when several events coincide in one step:
crash_vehicle > crash_obstacle > off_road > destination > horizon
(a crash at the finish line is not a success).
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

import numpy as np
import yaml

from .core import Action, ConfigError, Vec2, VehicleKind, VehicleState, seed_all
from .roads import Road, build_road
from .traffic import (
    B_EMERGENCY,
    FollowerObs,
    IdmParams,
    LateralGains,
    MAX_WHEEL_ANGLE_RAD,
    MobilParams,
    NeighborObs,
    decide,
    idm_accel,
)


class GenerationError(RuntimeError):
    """Scenario constraints cannot be satisfied (e.g. infeasible density)."""


class DoneReason(enum.Enum):
    NONE = "none"
    DESTINATION = "destination"
    CRASH_VEHICLE = "crash_vehicle"
    CRASH_OBSTACLE = "crash_obstacle"
    OFF_ROAD = "off_road"
    HORIZON = "horizon"


CAR_LENGTH, CAR_WIDTH = 4.5, 1.8
TRUCK_LENGTH, TRUCK_WIDTH = 8.0, 2.4
OBSTACLE_LENGTH, OBSTACLE_WIDTH = 3.0, 2.2
OBSTACLE_WINDOW = 18.0  # no window of this size may have every lane obstructed
MERGE_BACK, MERGE_AHEAD = 8.0, 12.0  # clearance needed around a merge
OBSTACLE_LOOKAHEAD = 48.0  # within the 50 m sensing range
STOPPED_SPEED = 0.5
LEADER_SCAN = 120.0
CONTINUITY_GUARD = 15.0  # max plausible per-step longitudinal travel, m


@dataclass
class ScenarioConfig:
    seed: int = 0
    num_segments: int = 0  # 0 = until map_length reached
    segment_kinds: Optional[dict] = None  # kind -> weight
    lane_count: int = 3
    traffic_density: float = 1.0  # vehicles per 100 m
    obstacle_rate: float = 0.0  # obstacles per 100 m
    map_length: float = 400.0
    lane_width: float = 3.5
    checkpoint_spacing: float = 50.0

    def __post_init__(self):
        if self.lane_count < 1:
            raise ConfigError("lane_count must be >= 1")
        if self.obstacle_rate > 0 and self.lane_count < 2:
            raise ConfigError("obstacles require lane_count >= 2 so avoidance is possible")
        if self.map_length < 2 * self.checkpoint_spacing:
            raise ConfigError("map_length must cover at least two checkpoints")

    def to_file(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(asdict(self), fh, sort_keys=True)

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: scenario config must be a flat key-value document")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"{path}: unknown scenario keys {unknown}")
        return cls(**data)


@dataclass
class SimParams:
    dt: float = 0.1
    wheelbase: float = 2.8
    a_max_drive: float = 2.0
    horizon: int = 1000
    c1: float = 1.0
    c2: float = 0.1
    r_destination: float = 20.0
    v_max_mps: float = 80.0 / 3.6
    idm: IdmParams = field(default_factory=IdmParams)
    mobil: MobilParams = field(default_factory=MobilParams)
    gains: LateralGains = field(default_factory=LateralGains)

    @classmethod
    def from_run_config(cls, cfg) -> "SimParams":
        return cls(
            horizon=cfg.horizon,
            c1=cfg.c1,
            c2=cfg.c2,
            r_destination=cfg.r_destination,
            v_max_mps=cfg.v_max_mps,
        )


@dataclass
class Agent:
    """A vehicle plus its Frenet bookkeeping."""

    uid: int
    state: VehicleState
    s: float
    d: float
    target_lane: int
    v0: float  # desired speed for IDM
    idx_hint: int = 0
    yaw_rate: float = 0.0
    cooldown: int = 0
    on_road: bool = True


@dataclass
class StepOutcome:
    next_obs: np.ndarray
    eval_reward: float
    eval_cost: float
    done: bool
    done_reason: DoneReason
    info: dict


@dataclass
class WorldState:
    road: Road
    ego: Agent
    others: List[Agent]
    obstacles: List[Agent]
    checkpoints: List[Vec2]
    checkpoint_s: np.ndarray
    scenario: ScenarioConfig
    time_step: int = 0
    next_checkpoint: int = 0
    last_action: Action = Action(0.0, 0.0)
    terminal: bool = False
    done_reason: DoneReason = DoneReason.NONE
    prev_ego_s: float = 0.0

    def lane_view(self, subject: Optional[Agent] = None) -> "LaneView":
        return LaneView(self, subject or self.ego)

    def destination_s(self) -> float:
        return float(self.checkpoint_s[-1])

    def overtake_snapshot(self) -> dict:
        return {
            "ego_s": self.ego.s,
            "others": {a.uid: (a.s, a.on_road) for a in self.others},
        }

    def all_objects(self) -> List[Agent]:
        return self.others + self.obstacles


def lanes_of(world: WorldState, agent: Agent) -> set:
    """Lane indices an agent currently occupies (two while mid-change)."""
    lane_now = world.road.nearest_lane(agent.d)
    occ = {lane_now}
    if agent.target_lane != lane_now:
        occ.add(agent.target_lane)
    return occ


class LaneView:
    """Measurement interface consumed by traffic.decide. All gaps are
    bumper-to-bumper along arc length; the subject itself is excluded."""

    def __init__(self, world: WorldState, subject: Agent):
        self.world = world
        self.subject = subject
        road = world.road
        self.ego_lane = road.nearest_lane(subject.d)
        self.ego_speed = subject.state.velocity
        self.ego_length = subject.state.length
        self.obstacle_lookahead = OBSTACLE_LOOKAHEAD
        tangent = road.project(subject.state.position.x, subject.state.position.y, subject.idx_hint)[2]
        self.heading_left = _wrap(subject.state.heading - tangent)
        self.yaw_rate = subject.yaw_rate
        self.off_road = abs(subject.d) + 0.5 * subject.state.width > road.half_width

    def _candidates(self, lane: int, vehicles_only: bool, include_ego_vehicle=True):
        objs = []
        for a in self.world.others:
            if a.uid == self.subject.uid or not a.on_road:
                continue
            if lane in lanes_of(self.world, a):
                objs.append(a)
        if include_ego_vehicle and self.subject.uid != self.world.ego.uid:
            if lane in lanes_of(self.world, self.world.ego):
                objs.append(self.world.ego)
        if not vehicles_only:
            for a in self.world.obstacles:
                if lane in lanes_of(self.world, a):
                    objs.append(a)
        return objs

    def leader(self, lane: int, vehicles_only: bool) -> Optional[NeighborObs]:
        s0 = self.subject.s
        best = None
        for a in self._candidates(lane, vehicles_only):
            ahead = a.s - s0
            if 0.0 < ahead <= LEADER_SCAN:
                gap = ahead - 0.5 * (a.state.length + self.ego_length)
                if best is None or gap < best.gap:
                    best = NeighborObs(gap, a.state.velocity)
        return best

    def follower(self, lane: int) -> Optional[FollowerObs]:
        s0 = self.subject.s
        best = None
        for a in self._candidates(lane, vehicles_only=True):
            behind = s0 - a.s
            if 0.0 < behind <= LEADER_SCAN:
                gap = behind - 0.5 * (a.state.length + self.ego_length)
                if best is None or gap < best[0]:
                    best = (gap, a)
        if best is None:
            return None
        gap_to_ego, fol = best
        lead_gap, lead_speed = math.inf, 0.0
        for a in self._candidates(lane, vehicles_only=True):
            if a.uid == fol.uid:
                continue
            ahead = a.s - fol.s
            if ahead > 0.0:
                g = ahead - 0.5 * (a.state.length + fol.state.length)
                if g < lead_gap:
                    lead_gap, lead_speed = g, a.state.velocity
        return FollowerObs(gap_to_ego, fol.state.velocity, lead_gap, lead_speed)

    def adjacent_lanes(self, lane: int) -> List[int]:
        return [ln for ln in (lane - 1, lane + 1) if self.world.road.lane_open(ln)]

    def open_lanes(self) -> List[int]:
        return list(range(self.world.road.lane_count))

    def lane_open(self, lane: int) -> bool:
        return self.world.road.lane_open(lane)

    @property
    def lane_width(self) -> float:
        return self.world.road.lane_width

    def lane_clear_for_merge(self, lane: int, tight: bool = False) -> bool:
        """tight=True shrinks the window to physical adjacency, letting a
        stopped vehicle work its way into a stopped queue."""
        back, ahead = (1.5, 2.5) if tight else (MERGE_BACK, MERGE_AHEAD)
        s0 = self.subject.s
        for a in self._candidates(lane, vehicles_only=False):
            half = 0.5 * (a.state.length + self.ego_length)
            if -(back + half) <= a.s - s0 <= ahead + half:
                return False
        return True

    def static_blocker(self, lane: int) -> Optional[float]:
        """Bumper gap to the nearest stationary object ahead in the lane."""
        s0 = self.subject.s
        best = None
        for a in self._candidates(lane, vehicles_only=False):
            if a.state.velocity > STOPPED_SPEED and a.state.kind is not VehicleKind.STATIC_OBSTACLE:
                continue
            ahead = a.s - s0
            if 0.0 < ahead <= LEADER_SCAN:
                gap = ahead - 0.5 * (a.state.length + self.ego_length)
                if best is None or gap < best:
                    best = gap
        return best

    def offset_left_of(self, lane: int) -> float:
        return self.subject.d - self.world.road.lane_center_offset(lane)

    def frontal_clearance(self, lanes) -> float:
        """Smallest bumper gap to any object ahead across the given lanes."""
        best = math.inf
        for lane in lanes:
            lead = self.leader(lane, vehicles_only=False)
            if lead is not None:
                best = min(best, lead.gap)
        return best

    def plan_next_lane(self, lookahead: float = 120.0, cell: float = 2.5, slack: float = 2.0) -> int:
        """One lane-step of a corridor plan around static blockages.

        Breadth-first search over a (lane x station) occupancy grid built from
        static obstacles and stopped vehicles, toward the first station past
        the current lane's blocker. Returns the lane to steer for next (the
        current lane when no change is needed or nothing is reachable).
        Lateral moves need the target cells free; at crawl speeds the source
        cell ahead may already be occupied (diagonal squeeze-out)."""
        from collections import deque

        road = self.world.road
        cur = self.ego_lane
        blocked = self.static_blocker(cur)
        if blocked is None or blocked > self.obstacle_lookahead:
            return cur
        s0 = self.subject.s
        xs = np.arange(s0, min(s0 + lookahead, road.length) + cell, cell)
        if len(xs) < 3:
            return cur
        L = road.lane_count
        occ = np.zeros((L, len(xs)), dtype=bool)

        def mark(lane, lo, hi):
            occ[lane, (xs >= lo) & (xs <= hi)] = True

        half_ego = 0.5 * self.ego_length
        for ob in self.world.obstacles:
            mark(ob.target_lane, ob.s - 0.5 * ob.state.length - slack - half_ego,
                 ob.s + 0.5 * ob.state.length + slack + half_ego)
        for a in self.world.others:
            if a.uid == self.subject.uid or not a.on_road:
                continue
            if a.state.velocity < STOPPED_SPEED:
                mark(road.nearest_lane(a.d), a.s - 0.5 * a.state.length - slack - half_ego,
                     a.s + 0.5 * a.state.length + slack + half_ego)
        crawl = self.ego_speed < 1.0
        goal_i = min(int(np.searchsorted(xs, s0 + blocked + 12.0)), len(xs) - 1)
        start = (cur, 0)
        prev = {start: None}
        queue = deque([start])
        goal = None
        while queue:
            lane, i = queue.popleft()
            if i >= goal_i:
                goal = (lane, i)
                break
            nxt = []
            if not occ[lane, i + 1]:
                nxt.append((lane, i + 1))
            for nl in (lane - 1, lane + 1):
                if not (0 <= nl < L):
                    continue
                # the landing pocket must be deep enough to swing into
                depth = occ[nl, i : min(i + 3, len(xs))]
                if depth.any():
                    continue
                if occ[lane, i + 1] and not crawl:
                    continue
                nxt.append((nl, i + 1))
            for node in nxt:
                if node not in prev:
                    prev[node] = (lane, i)
                    queue.append(node)
        if goal is None:
            return cur
        node, path = goal, [goal]
        while prev[node] is not None:
            node = prev[node]
            path.append(node)
        path.reverse()
        # first lane change scheduled within the next few cells is acted on now
        for lane, i in path[1:4]:
            if lane != cur:
                return lane
        return cur


def _wrap(a: float) -> float:
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


def rect_corners(cx, cy, heading, length, width) -> np.ndarray:
    c, s = math.cos(heading), math.sin(heading)
    dx, dy = 0.5 * length, 0.5 * width
    local = np.array([[dx, dy], [dx, -dy], [-dx, -dy], [-dx, dy]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def rects_overlap(c1: np.ndarray, c2: np.ndarray) -> bool:
    """Separating-axis test for two convex quads given as (4,2) corners."""
    for quad in (c1, c2):
        for i in range(2):
            edge = quad[(i + 1) % 4] - quad[i]
            axis = np.array([-edge[1], edge[0]])
            p1 = c1 @ axis
            p2 = c2 @ axis
            if p1.max() < p2.min() or p2.max() < p1.min():
                return False
    return True


def agent_corners(a: Agent) -> np.ndarray:
    return rect_corners(
        a.state.position.x, a.state.position.y, a.state.heading, a.state.length, a.state.width
    )


# ---------------------------------------------------------------------------
# scenario generation


def _spawn_agent(uid, road, s, lane, v, kind, length, width, v0) -> Agent:
    d = road.lane_center_offset(lane)
    x, y, h = road.to_cartesian(s, d)
    st = VehicleState(Vec2(x, y), h, v, lane, length, width, kind)
    idx = int(np.searchsorted(road.arclength, s)) - 1
    return Agent(uid, st, s, d, lane, v0, idx_hint=max(idx, 0))


def generate_scenario(cfg: ScenarioConfig) -> WorldState:
    """Deterministic world synthesis from (seed, config)."""
    rng = seed_all(cfg.seed).stream("scenario")
    road = build_road(rng, cfg.map_length, cfg.lane_count, cfg.lane_width, cfg.segment_kinds)
    if cfg.num_segments > 0:
        # keep only the first N segments' worth of road
        spans = road.segment_kinds[: cfg.num_segments]
        if spans and spans[-1][2] < road.length:
            cut = float(spans[-1][2])
            keep = road.arclength <= cut + 1e-9
            road = Road(
                road.points[keep],
                road.headings[keep],
                road.arclength[keep],
                road.lane_count,
                road.lane_width,
                spans,
            )

    cps = np.arange(cfg.checkpoint_spacing, road.length - 4.0, cfg.checkpoint_spacing)
    if len(cps) < 2:
        raise GenerationError("map too short for two checkpoints")
    checkpoints = []
    for s in cps:
        x, y, _ = road.to_cartesian(float(s), 0.0)
        checkpoints.append(Vec2(x, y))

    ego_lane = int(rng.integers(0, cfg.lane_count))
    ego = _spawn_agent(0, road, 6.0, ego_lane, 0.0, VehicleKind.EGO, CAR_LENGTH, CAR_WIDTH, 22.0)

    usable = road.length - 60.0
    uid = 1
    n_req = int(rng.poisson(cfg.traffic_density * road.length / 100.0))
    if n_req > 0:
        max_len = TRUCK_LENGTH
        capacity = cfg.lane_count * usable / (IdmParams().s0 + max_len + 2.0)
        if n_req > capacity:
            raise GenerationError(
                f"traffic density infeasible: {n_req} vehicles requested, capacity ~{capacity:.0f}"
            )
    placed: List[Agent] = []
    for _ in range(n_req):
        for _attempt in range(40):
            s = float(rng.uniform(ego.s + 25.0, road.length - 25.0))
            lane = int(rng.integers(0, cfg.lane_count))
            truck = rng.random() < 0.2
            length = TRUCK_LENGTH if truck else CAR_LENGTH
            width = TRUCK_WIDTH if truck else CAR_WIDTH
            v0 = float(rng.uniform(0.45, 0.8)) * 22.0
            v = float(rng.uniform(0.3, 0.7)) * v0
            ok = True
            for b in placed + [ego]:
                if road.nearest_lane(b.d) == lane:
                    if abs(b.s - s) - 0.5 * (b.state.length + length) < IdmParams().s0:
                        ok = False
                        break
            if ok:
                kind = VehicleKind.TRUCK if truck else VehicleKind.CAR
                placed.append(_spawn_agent(uid, road, s, lane, v, kind, length, width, v0))
                uid += 1
                break
    others = placed

    obstacles: List[Agent] = []
    n_obs = int(rng.poisson(cfg.obstacle_rate * road.length / 100.0))
    for _ in range(n_obs):
        for _attempt in range(60):
            s = float(rng.uniform(ego.s + 60.0, road.length - 30.0))
            lane = int(rng.integers(0, cfg.lane_count))
            window_lanes = {lane}
            for ob in obstacles:
                reach = 0.5 * (ob.state.length + OBSTACLE_LENGTH) + OBSTACLE_WINDOW
                if abs(ob.s - s) <= reach:
                    window_lanes.add(ob.target_lane)
            if len(window_lanes) >= cfg.lane_count:
                continue
            clear = True
            for b in others + obstacles + [ego]:
                if road.nearest_lane(b.d) == lane:
                    if abs(b.s - s) - 0.5 * (b.state.length + OBSTACLE_LENGTH) < IdmParams().s0:
                        clear = False
                        break
            if clear:
                obstacles.append(
                    _spawn_agent(
                        uid, road, s, lane, 0.0, VehicleKind.STATIC_OBSTACLE,
                        OBSTACLE_LENGTH, OBSTACLE_WIDTH, 0.1,
                    )
                )
                uid += 1
                break

    world = WorldState(
        road=road,
        ego=ego,
        others=others,
        obstacles=obstacles,
        checkpoints=checkpoints,
        checkpoint_s=cps.astype(np.float64),
        scenario=cfg,
        prev_ego_s=ego.s,
    )
    assert_obstacles_leave_a_lane(world)
    return world


def assert_obstacles_leave_a_lane(world: WorldState, step: float = 1.0):
    """Exhaustive scan: at every longitudinal station, at least one lane is
    free of static obstacles (with the drivability window applied)."""
    if not world.obstacles:
        return
    stations = np.arange(0.0, world.road.length, step)
    for s in stations:
        occupied = set()
        for ob in world.obstacles:
            if abs(ob.s - s) <= 0.5 * ob.state.length + 0.5 * OBSTACLE_WINDOW:
                occupied.add(ob.target_lane)
        if len(occupied) >= world.road.lane_count:
            raise GenerationError(f"all lanes obstructed near s={s:.1f}")


# ---------------------------------------------------------------------------
# stepping


def throttle_to_accel(throttle: float, params: SimParams) -> float:
    if throttle >= 0.0:
        return throttle * params.a_max_drive
    return throttle * B_EMERGENCY


def _advance_ego(world: WorldState, action: Action, params: SimParams):
    ego = world.ego
    st = ego.state
    wheel = -action.steer * MAX_WHEEL_ANGLE_RAD  # negative steer = left = CCW
    a = throttle_to_accel(action.throttle, params)
    v = max(0.0, st.velocity + a * params.dt)
    yaw_rate = (v / params.wheelbase) * math.tan(wheel)
    heading = _wrap(st.heading + yaw_rate * params.dt)
    x = st.position.x + v * params.dt * math.cos(heading)
    y = st.position.y + v * params.dt * math.sin(heading)
    ego.yaw_rate = yaw_rate
    s, d, _, idx = world.road.project(x, y, ego.idx_hint)
    ego.idx_hint = idx
    ego.s, ego.d = s, d
    lane = world.road.nearest_lane(d)
    ego.target_lane = lane
    ego.state = VehicleState(Vec2(x, y), heading, v, lane, st.length, st.width, st.kind)
    ego.on_road = abs(d) + 0.5 * st.width <= world.road.half_width


def _advance_traffic(world: WorldState, params: SimParams):
    road = world.road
    for a in sorted(world.others, key=lambda v: v.uid):
        if not a.on_road:
            continue
        view = world.lane_view(a)
        idm = IdmParams(v0=max(a.v0, 0.5))
        lane_now = road.nearest_lane(a.d)
        mid_change = a.target_lane != lane_now or abs(
            a.d - road.lane_center_offset(a.target_lane)
        ) > 0.05
        if mid_change or a.cooldown > 0:
            lead = view.leader(lane_now, vehicles_only=False)
            if a.target_lane != lane_now:
                lead_t = view.leader(a.target_lane, vehicles_only=False)
                if lead_t is not None and (lead is None or lead_t.gap < lead.gap):
                    lead = lead_t
            if lead is None:
                accel = idm_accel(a.state.velocity, 0.0, math.inf, idm)
            else:
                accel = (
                    -B_EMERGENCY
                    if lead.gap <= 0
                    else idm_accel(a.state.velocity, a.state.velocity - lead.speed, lead.gap, idm)
                )
            target = a.target_lane
            a.cooldown = max(0, a.cooldown - 1)
        else:
            dec = decide(view, idm, params.mobil, params.gains, obstacle_aware=False)
            accel = throttle_to_accel(dec.action.throttle, params)
            target = dec.target_lane
            if target != a.target_lane:
                a.cooldown = 30
            a.target_lane = target

        v = max(0.0, a.state.velocity + accel * params.dt)
        a.s += v * params.dt
        target_d = road.lane_center_offset(a.target_lane)
        max_slide = road.lane_width / params.mobil.lane_change_time_gap * params.dt
        delta = target_d - a.d
        a.d += math.copysign(min(abs(delta), max_slide), delta) if delta else 0.0
        if a.s >= road.length - 1.0:
            a.on_road = False
            continue
        x, y, h = road.to_cartesian(a.s, a.d)
        idx = int(np.searchsorted(road.arclength, a.s)) - 1
        a.idx_hint = max(idx, 0)
        lane = road.nearest_lane(a.d)
        a.state = VehicleState(
            Vec2(x, y), h, v, lane, a.state.length, a.state.width, a.state.kind
        )


def detect_overtake(prev, nxt) -> int:
    """Vehicles whose longitudinal coordinate crossed from ahead-of-ego to
    behind-ego between two consecutive snapshots, with a continuity guard
    against teleports."""
    prev_snap = prev if isinstance(prev, dict) else prev.overtake_snapshot()
    next_snap = nxt if isinstance(nxt, dict) else nxt.overtake_snapshot()
    if abs(next_snap["ego_s"] - prev_snap["ego_s"]) > CONTINUITY_GUARD:
        return 0
    count = 0
    for uid, (s_prev, on_prev) in prev_snap["others"].items():
        if uid not in next_snap["others"]:
            continue
        s_next, on_next = next_snap["others"][uid]
        if not (on_prev and on_next):
            continue
        if abs(s_next - s_prev) > CONTINUITY_GUARD:
            continue
        if s_prev > prev_snap["ego_s"] and s_next < next_snap["ego_s"]:
            count += 1
    return count


def step(world: WorldState, ego_action: Action, params: Optional[SimParams] = None) -> StepOutcome:
    """Advance the world one tick. The caller must not step a terminal world."""
    if world.terminal:
        raise RuntimeError("step() called on a terminal world")
    params = params or SimParams()
    from .lidar import observe

    snap_prev = world.overtake_snapshot()
    prev_s = world.ego.s
    _advance_ego(world, ego_action, params)
    _advance_traffic(world, params)
    world.last_action = ego_action

    ego_c = agent_corners(world.ego)
    crash_vehicle = any(
        a.on_road and rects_overlap(ego_c, agent_corners(a)) for a in world.others
    )
    crash_obstacle = any(rects_overlap(ego_c, agent_corners(a)) for a in world.obstacles)
    off_road = not world.ego.on_road
    reached = world.ego.s >= world.destination_s()
    world.time_step += 1
    horizon_hit = world.time_step >= params.horizon

    reason = DoneReason.NONE
    if crash_vehicle:
        reason = DoneReason.CRASH_VEHICLE
    elif crash_obstacle:
        reason = DoneReason.CRASH_OBSTACLE
    elif off_road:
        reason = DoneReason.OFF_ROAD
    elif reached:
        reason = DoneReason.DESTINATION
    elif horizon_hit:
        reason = DoneReason.HORIZON
    done = reason is not DoneReason.NONE

    ds = world.ego.s - prev_s
    v = world.ego.state.velocity
    if done:
        reward = params.r_destination if reason is DoneReason.DESTINATION else 0.0
    else:
        reward = params.c1 * ds + params.c2 * (v / params.v_max_mps)
    cost = 1.0 if (crash_vehicle or crash_obstacle or off_road) else 0.0

    while (
        world.next_checkpoint < len(world.checkpoint_s) - 1
        and world.ego.s >= world.checkpoint_s[world.next_checkpoint]
    ):
        world.next_checkpoint += 1

    overtakes = detect_overtake(snap_prev, world.overtake_snapshot())
    world.terminal = done
    world.done_reason = reason
    world.prev_ego_s = world.ego.s

    obs = observe(world, params.v_max_mps)
    info = {
        "delta_distance": ds,
        "speed_mps": v,
        "overtakes": overtakes,
        "crash_vehicle": crash_vehicle,
        "crash_obstacle": crash_obstacle,
        "off_road": off_road,
    }
    return StepOutcome(obs, reward, cost, done, reason, info)


class DrivingEnv:
    """Episode loop helper: cycles deterministically through a scenario list
    and regenerates each world from its (seed, config) tuple."""

    def __init__(self, scenarios: List[ScenarioConfig], params: Optional[SimParams] = None):
        if not scenarios:
            raise ConfigError("DrivingEnv needs at least one scenario")
        self.scenarios = list(scenarios)
        self.params = params or SimParams()
        self.episode_idx = -1
        self.world: Optional[WorldState] = None

    @property
    def obs_dim(self) -> int:
        from .core import OBS_DIM

        return OBS_DIM

    def reset(self) -> np.ndarray:
        from .lidar import observe

        self.episode_idx += 1
        cfg = self.scenarios[self.episode_idx % len(self.scenarios)]
        self.world = generate_scenario(cfg)
        return observe(self.world, self.params.v_max_mps)

    def step(self, action: Action) -> StepOutcome:
        if self.world is None:
            raise RuntimeError("step() before reset()")
        return step(self.world, action, self.params)


class TrajectoryWriter:
    """Line-delimited trajectory dump for offline inspection and UI replay.

    Field order per line (JSON object, sorted keys): action [steer, throttle],
    cost, ego [x, y, heading, speed, lane, length, width], obstacles
    [[uid, x, y, heading, speed, lane, length, width], ...], others (same
    shape), reward, t.
    """

    def __init__(self, path):
        self._fh = open(path, "w", encoding="utf-8")

    @staticmethod
    def _vehicle_row(a: Agent, with_uid: bool = True):
        st = a.state
        row = [
            st.position.x, st.position.y, st.heading, st.velocity,
            st.lane_index, st.length, st.width,
        ]
        return [a.uid] + row if with_uid else row

    def append(self, world: WorldState, action: Action, reward: float, cost: float):
        import json

        rec = {
            "t": world.time_step,
            "ego": self._vehicle_row(world.ego, with_uid=False),
            "others": [self._vehicle_row(a) for a in world.others],
            "obstacles": [self._vehicle_row(a) for a in world.obstacles],
            "action": [action.steer, action.throttle],
            "reward": reward,
            "cost": cost,
        }
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self):
        self._fh.close()
