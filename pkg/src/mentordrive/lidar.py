"""Lidar synthesis and observation assembly.

240 rays uniformly span 360 degrees starting at the ego heading (CCW). Rays
hit vehicle and obstacle rectangles only; road boundaries are reported by the
ego-state block, not the lidar. Entry = min(hit, 50 m) / 50 m, 1.0 = no hit.
"""

from __future__ import annotations

import math

import numpy as np

from .core import (
    LIDAR_DIM,
    LIDAR_RANGE,
    NAV_DIM,
    NAV_RANGE,
    OBS_DIM,
    YAW_RATE_MAX,
    signed_to_unit,
    unit_clamp,
    wrap_angle,
)

_RAY_OFFSETS = 2.0 * math.pi * np.arange(LIDAR_DIM) / LIDAR_DIM


def _collect_segments(world) -> np.ndarray:
    """(M, 4) array of x1,y1,x2,y2 rectangle edges for every other object."""
    from .world import agent_corners

    segs = []
    ego = world.ego
    for a in world.others + world.obstacles:
        if not a.on_road:
            continue
        dx = a.state.position.x - ego.state.position.x
        dy = a.state.position.y - ego.state.position.y
        if dx * dx + dy * dy > (LIDAR_RANGE + a.state.length) ** 2:
            continue
        c = agent_corners(a)
        for i in range(4):
            j = (i + 1) % 4
            segs.append((c[i, 0], c[i, 1], c[j, 0], c[j, 1]))
    if not segs:
        return np.empty((0, 4))
    return np.asarray(segs, dtype=np.float64)


def cast_rays(origin: np.ndarray, angles: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Distance to the nearest segment along each ray, +inf for no hit.

    Solves origin + t*dir = p1 + u*(p2-p1) for t >= 0, u in [0, 1],
    vectorised over the ray x segment grid.
    """
    n_rays = len(angles)
    if len(segments) == 0:
        return np.full(n_rays, np.inf)
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)  # (R,2)
    p1 = segments[:, 0:2]
    d_seg = segments[:, 2:4] - p1  # (M,2)
    rel = p1 - origin[None, :]  # (M,2)
    # denom = cross(dir, d_seg); per ray r and segment m
    denom = dirs[:, 0:1] * d_seg[None, :, 1] - dirs[:, 1:2] * d_seg[None, :, 0]  # (R,M)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (rel[None, :, 0] * d_seg[None, :, 1] - rel[None, :, 1] * d_seg[None, :, 0]) / denom
        u = (rel[None, :, 0] * dirs[:, 1:2] - rel[None, :, 1] * dirs[:, 0:1]) / denom
    valid = (np.abs(denom) > 1e-12) & (t >= 0.0) & (u >= 0.0) & (u <= 1.0)
    t = np.where(valid, t, np.inf)
    return t.min(axis=1)


def lidar_scan(world) -> np.ndarray:
    ego = world.ego
    origin = np.array([ego.state.position.x, ego.state.position.y])
    angles = ego.state.heading + _RAY_OFFSETS
    dists = cast_rays(origin, angles, _collect_segments(world))
    return np.minimum(dists, LIDAR_RANGE) / LIDAR_RANGE


def _ego_block(world, v_max_mps: float) -> np.ndarray:
    ego = world.ego
    road = world.road
    half = road.half_width
    width = 2.0 * half
    last = world.last_action
    tangent = road.project(ego.state.position.x, ego.state.position.y, ego.idx_hint)[2]
    rel_heading = wrap_angle(ego.state.heading - tangent)
    return np.array(
        [
            signed_to_unit(last.steer, 1.0),
            signed_to_unit(rel_heading, math.pi),
            unit_clamp(ego.state.velocity / v_max_mps),
            unit_clamp((half - ego.d) / width),  # to left boundary
            unit_clamp((half + ego.d) / width),  # to right boundary
            signed_to_unit(last.steer, 1.0),
            signed_to_unit(last.throttle, 1.0),
            signed_to_unit(ego.yaw_rate, YAW_RATE_MAX),
            0.0 if ego.on_road else 1.0,
        ],
        dtype=np.float64,
    )


def _nav_block(world) -> np.ndarray:
    ego = world.ego
    road = world.road
    n = len(world.checkpoint_s)
    idx0 = min(world.next_checkpoint, n - 1)
    idx1 = min(idx0 + 1, n - 1)
    cos_h, sin_h = math.cos(ego.state.heading), math.sin(ego.state.heading)
    out = np.empty(NAV_DIM, dtype=np.float64)
    for k, idx in enumerate((idx0, idx1)):
        cp = world.checkpoints[idx]
        dx = cp.x - ego.state.position.x
        dy = cp.y - ego.state.position.y
        fwd = cos_h * dx + sin_h * dy
        lat = -sin_h * dx + cos_h * dy
        _, _, cp_heading = road.to_cartesian(float(world.checkpoint_s[idx]), 0.0)
        rel = wrap_angle(cp_heading - ego.state.heading)
        dist = math.hypot(dx, dy)
        out[5 * k : 5 * k + 5] = (
            signed_to_unit(fwd, NAV_RANGE),
            signed_to_unit(lat, NAV_RANGE),
            0.5 * (math.sin(rel) + 1.0),
            0.5 * (math.cos(rel) + 1.0),
            unit_clamp(dist / NAV_RANGE),
        )
    return out


def observe(world, v_max_mps: float = 80.0 / 3.6) -> np.ndarray:
    """Assemble the full observation vector. Never emits NaN/Inf."""
    obs = np.concatenate([_ego_block(world, v_max_mps), _nav_block(world), lidar_scan(world)])
    assert obs.shape == (OBS_DIM,)
    if not np.all(np.isfinite(obs)):
        bad = np.flatnonzero(~np.isfinite(obs))
        raise FloatingPointError(f"non-finite observation entries at {bad}")
    return obs
