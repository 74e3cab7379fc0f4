"""Shared test fixtures: hand-built worlds on a straight road and the
reward-taint probe wrapper."""

import math

import numpy as np

from mentordrive.core import Vec2, VehicleKind, VehicleState
from mentordrive.roads import Road
from mentordrive.world import (
    Agent,
    CAR_LENGTH,
    CAR_WIDTH,
    OBSTACLE_LENGTH,
    OBSTACLE_WIDTH,
    ScenarioConfig,
    WorldState,
)


def straight_road(length=600.0, lane_count=3, lane_width=3.5) -> Road:
    xs = np.arange(0.0, length + 2.0, 2.0)
    points = np.stack([xs, np.zeros_like(xs)], axis=1)
    return Road(points, np.zeros(len(xs)), xs.copy(), lane_count, lane_width, [("straight", 0.0, length)])


def make_agent(uid, road, s, lane, v, kind=VehicleKind.CAR, length=CAR_LENGTH, width=CAR_WIDTH, v0=20.0, d=None):
    d = road.lane_center_offset(lane) if d is None else d
    x, y, h = road.to_cartesian(s, d)
    st = VehicleState(Vec2(x, y), h, v, lane, length, width, kind)
    return Agent(uid, st, s, d, lane, v0, idx_hint=max(int(s // 2) - 1, 0))


def make_world(
    ego_s=10.0,
    ego_lane=1,
    ego_v=0.0,
    others=(),
    obstacles=(),
    length=600.0,
    lane_count=3,
    checkpoint_spacing=50.0,
    ego_d=None,
    ego_heading=None,
) -> WorldState:
    """others/obstacles: iterables of (s, lane, v) / (s, lane)."""
    road = straight_road(length, lane_count)
    ego = make_agent(0, road, ego_s, ego_lane, ego_v, VehicleKind.EGO, d=ego_d)
    if ego_heading is not None:
        st = ego.state
        ego.state = VehicleState(st.position, ego_heading, st.velocity, st.lane_index, st.length, st.width, st.kind)
    uid = 1
    other_agents = []
    for (s, lane, v) in others:
        other_agents.append(make_agent(uid, road, s, lane, v))
        uid += 1
    obstacle_agents = []
    for (s, lane) in obstacles:
        obstacle_agents.append(
            make_agent(uid, road, s, lane, 0.0, VehicleKind.STATIC_OBSTACLE, OBSTACLE_LENGTH, OBSTACLE_WIDTH)
        )
        uid += 1
    cps = np.arange(checkpoint_spacing, length - 4.0, checkpoint_spacing)
    checkpoints = [Vec2(*road.to_cartesian(float(s), 0.0)[:2]) for s in cps]
    cfg = ScenarioConfig(seed=0, map_length=length, lane_count=lane_count, checkpoint_spacing=checkpoint_spacing)
    return WorldState(
        road=road,
        ego=ego,
        others=other_agents,
        obstacles=obstacle_agents,
        checkpoints=checkpoints,
        checkpoint_s=cps.astype(np.float64),
        scenario=cfg,
        prev_ego_s=ego.s,
    )


class PerturbedRewardEnv:
    """Env wrapper that mangles the reported evaluation reward/cost without
    touching dynamics. Training updates must be unaffected by it."""

    def __init__(self, env, scale=100.0, cost_flip=True):
        self.env = env
        self.scale = scale
        self.cost_flip = cost_flip

    @property
    def obs_dim(self):
        return self.env.obs_dim

    @property
    def world(self):
        return self.env.world

    def reset(self):
        return self.env.reset()

    def step(self, action):
        out = self.env.step(action)
        out.eval_reward = out.eval_reward * self.scale + 7.0
        if self.cost_flip:
            out.eval_cost = 1.0 - out.eval_cost
        return out
