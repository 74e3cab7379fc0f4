"""Mentor abstraction: scripted synthetic mentors with configurable
proficiency/degradation, a live-human adapter fed by the bridge latch, and
demonstration recording with a versioned binary dataset format.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple

import numpy as np

from .arbitration import TakeoverSignal
from .core import Action, ConfigError, RngHandle
from .traffic import IdmParams, LateralGains, MobilParams, decide
from .world import STOPPED_SPEED, DrivingEnv

DATASET_MAGIC = b"MDDS"
DATASET_VERSION = 1


@dataclass
class SyntheticMentorConfig:
    base_policy: str = "oracle_physics_plus"  # or "noisy_physics"
    tau_ttc: float = 2.0  # s, takeover when time-to-collision drops below
    d_margin: float = 0.3  # m, takeover when boundary clearance drops below
    action_noise_sigma: float = 0.0
    # piecewise-linear (env_step, noise_sigma, dropout_prob) breakpoints
    degradation_schedule: List[Tuple[int, float, float]] = field(default_factory=list)
    release_hold_steps: int = 5
    # pace rule: a mentor also takes over when the agent makes no meaningful
    # progress (stuck, circling, or uselessly slow), which the two geometric
    # triggers cannot see
    stall_steps: int = 30
    stall_progress: float = 8.0  # m of progress expected per trailing window
    # action-based vigilance: grab control when the agent's action clearly
    # deviates from what the mentor would do (None disables)
    deviation_threshold: Optional[float] = None

    def __post_init__(self):
        if self.base_policy not in ("oracle_physics_plus", "noisy_physics"):
            raise ConfigError(f"unknown mentor base policy {self.base_policy!r}")
        if self.action_noise_sigma < 0:
            raise ConfigError("action noise sigma must be >= 0")
        sig = [s for (_, s, _) in self.degradation_schedule]
        if any(b < a for a, b in zip(sig, sig[1:])):
            raise ConfigError("degradation schedule noise must be non-decreasing")


PRESETS = {
    # a vigilant mentor keeps control for a while after the danger clears,
    # hands back once stable, and grabs on clearly-wrong agent actions
    "professional": SyntheticMentorConfig(
        action_noise_sigma=0.05, release_hold_steps=25, deviation_threshold=1.25
    ),
    "amateur": SyntheticMentorConfig(
        action_noise_sigma=0.3,
        release_hold_steps=25,
        deviation_threshold=1.4,
        degradation_schedule=[(0, 0.3, 0.0), (30_000, 0.9, 0.5)],
    ),
}


def mentor_preset(name: str) -> SyntheticMentorConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown mentor preset {name!r}; choose from {sorted(PRESETS)}")
    cfg = replace(PRESETS[name])
    cfg.degradation_schedule = list(cfg.degradation_schedule)
    return cfg


def schedule_at(schedule: List[Tuple[int, float, float]], base_sigma: float, step: int):
    """(noise sigma, dropout prob) at an env step, piecewise-linear."""
    if not schedule:
        return base_sigma, 0.0
    pts = sorted(schedule)
    if step <= pts[0][0]:
        return max(base_sigma, pts[0][1]), pts[0][2]
    for (s0, n0, d0), (s1, n1, d1) in zip(pts, pts[1:]):
        if s0 <= step <= s1:
            t = (step - s0) / max(1, (s1 - s0))
            return max(base_sigma, n0 + t * (n1 - n0)), d0 + t * (d1 - d0)
    return max(base_sigma, pts[-1][1]), pts[-1][2]


def time_to_collision(world) -> float:
    """TTC against the nearest blocking object in the ego's lane(s)."""
    view = world.lane_view()
    lead = view.leader(view.ego_lane, vehicles_only=False)
    if lead is None or lead.gap <= 0:
        return 0.0 if (lead is not None) else math.inf
    closing = world.ego.state.velocity - lead.speed
    if closing <= 1e-6:
        return math.inf
    return lead.gap / closing


def boundary_clearance(world) -> float:
    ego = world.ego
    half = world.road.half_width
    return half - abs(ego.d) - 0.5 * ego.state.width


class SyntheticMentor:
    """Scripted stand-in for a human mentor. Deterministic given
    (seed, world trace) when sigma = 0 and no degradation is scheduled."""

    def __init__(
        self,
        cfg: SyntheticMentorConfig,
        rng: RngHandle,
        idm: Optional[IdmParams] = None,
        mobil: Optional[MobilParams] = None,
        gains: Optional[LateralGains] = None,
        continuous: bool = False,
    ):
        self.cfg = cfg
        self.rng = rng.stream("mentor")
        self.idm = idm or IdmParams()
        self.mobil = mobil or MobilParams()
        self.gains = gains or LateralGains()
        self.continuous = continuous
        self._hold = 0
        self._trail = []  # trailing ego-s samples for the pace rule
        self.kind = f"synthetic/{cfg.base_policy}"

    def reset_episode(self):
        self._hold = 0
        self._trail = []

    def base_action(self, world) -> Action:
        dec = decide(
            world.lane_view(),
            self.idm,
            self.mobil,
            self.gains,
            obstacle_aware=self.cfg.base_policy == "oracle_physics_plus",
        )
        return dec.action

    def action(self, world, step: int) -> Action:
        a = self.base_action(world)
        sigma, _ = schedule_at(self.cfg.degradation_schedule, self.cfg.action_noise_sigma, step)
        if sigma > 0:
            noise = self.rng.normal(0.0, sigma, size=2)
            return Action(a.steer + float(noise[0]), a.throttle + float(noise[1]))
        return a

    def triggered(self, world) -> bool:
        if time_to_collision(world) < self.cfg.tau_ttc:
            return True
        if boundary_clearance(world) < self.cfg.d_margin:
            return True
        self._trail.append(world.ego.s)
        if len(self._trail) <= self.cfg.stall_steps:
            return False
        self._trail = self._trail[-(self.cfg.stall_steps + 1) :]
        return self._trail[-1] - self._trail[0] < self.cfg.stall_progress

    def poll(self, obs, world, a_av: Action, step: int) -> TakeoverSignal:
        if self.continuous:
            return TakeoverSignal(True, self.action(world, step))
        _, dropout = schedule_at(self.cfg.degradation_schedule, self.cfg.action_noise_sigma, step)
        fired = self.triggered(world)
        if not fired and self.cfg.deviation_threshold is not None:
            ref = self.base_action(world)
            dev = math.hypot(a_av.steer - ref.steer, a_av.throttle - ref.throttle)
            fired = dev > self.cfg.deviation_threshold
        if fired:
            if dropout > 0 and self.rng.random() < dropout:
                # degraded mentor misses the event entirely
                self._hold = 0
                return TakeoverSignal(False)
            self._hold = self.cfg.release_hold_steps
            return TakeoverSignal(True, self.action(world, step))
        if self._hold > 0:
            self._hold -= 1
            return TakeoverSignal(True, self.action(world, step))
        return TakeoverSignal(False)


class HumanMentorAdapter:
    """Reads the latest latched takeover input from the bridge. Stale input
    (older than stale_after seconds) degrades to inactive, never blocks."""

    def __init__(self, latch, stale_after: float = 0.2):
        self.latch = latch
        self.stale_after = stale_after
        self.kind = "human"

    def reset_episode(self):
        pass

    def poll(self, obs, world, a_av: Action, step: int) -> TakeoverSignal:
        snap = self.latch.snapshot()
        if snap is None or not snap.active:
            return TakeoverSignal(False)
        if snap.age() > self.stale_after:
            return TakeoverSignal(False)
        return TakeoverSignal(True, Action(snap.steer, snap.throttle))


# ---------------------------------------------------------------------------
# demonstration datasets


class DatasetError(RuntimeError):
    pass


@dataclass
class DemoDataset:
    """Reward-carrying transitions for warmup. Arrays are float32 except the
    reward (float64) and done flags (uint8); round-trips are bit-exact."""

    obs: np.ndarray
    act: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    next_act: np.ndarray
    done: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.obs)

    def save(self, path):
        header = {
            "version": DATASET_VERSION,
            "count": len(self),
            "obs_dim": int(self.obs.shape[1]),
            "act_dim": int(self.act.shape[1]),
            "meta": self.meta,
            "layout": "obs f32*obs_dim | act f32*act_dim | reward f64 | "
            "next_obs f32*obs_dim | next_act f32*act_dim | done u8",
        }
        raw_header = json.dumps(header, sort_keys=True).encode("utf-8")
        buf = io.BytesIO()
        buf.write(DATASET_MAGIC)
        buf.write(struct.pack("<II", DATASET_VERSION, len(raw_header)))
        buf.write(raw_header)
        for i in range(len(self)):
            buf.write(self.obs[i].astype("<f4").tobytes())
            buf.write(self.act[i].astype("<f4").tobytes())
            buf.write(struct.pack("<d", float(self.reward[i])))
            buf.write(self.next_obs[i].astype("<f4").tobytes())
            buf.write(self.next_act[i].astype("<f4").tobytes())
            buf.write(struct.pack("<B", int(self.done[i])))
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(buf.getvalue())
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path) -> "DemoDataset":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != DATASET_MAGIC:
                raise DatasetError(f"{path}: bad magic {magic!r}")
            version, hlen = struct.unpack("<II", fh.read(8))
            if version != DATASET_VERSION:
                raise DatasetError(f"{path}: unsupported dataset version {version}")
            try:
                header = json.loads(fh.read(hlen).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError) as e:
                raise DatasetError(f"{path}: corrupt header: {e}") from e
            n = header["count"]
            od, ad = header["obs_dim"], header["act_dim"]
            rec = 4 * od + 4 * ad + 8 + 4 * od + 4 * ad + 1
            blob = fh.read()
        if len(blob) != n * rec:
            raise DatasetError(f"{path}: truncated records ({len(blob)} != {n * rec})")
        obs = np.empty((n, od), np.float32)
        act = np.empty((n, ad), np.float32)
        reward = np.empty(n, np.float64)
        next_obs = np.empty((n, od), np.float32)
        next_act = np.empty((n, ad), np.float32)
        done = np.empty(n, np.uint8)
        off = 0
        for i in range(n):
            obs[i] = np.frombuffer(blob, "<f4", od, off); off += 4 * od
            act[i] = np.frombuffer(blob, "<f4", ad, off); off += 4 * ad
            reward[i] = struct.unpack_from("<d", blob, off)[0]; off += 8
            next_obs[i] = np.frombuffer(blob, "<f4", od, off); off += 4 * od
            next_act[i] = np.frombuffer(blob, "<f4", ad, off); off += 4 * ad
            done[i] = blob[off]; off += 1
        return cls(obs, act, reward, next_obs, next_act, done, header["meta"])

    def export_text(self, path, limit: Optional[int] = None):
        """Companion human-readable export (one transition per line)."""
        n = len(self) if limit is None else min(limit, len(self))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"# demo dataset: {json.dumps(self.meta, sort_keys=True)}\n")
            fh.write("# i | reward | done | act | next_act | obs[:6]\n")
            for i in range(n):
                fh.write(
                    f"{i}\t{self.reward[i]:.6f}\t{int(self.done[i])}\t"
                    f"{self.act[i].tolist()}\t{self.next_act[i].tolist()}\t"
                    f"{np.round(self.obs[i][:6], 4).tolist()}\n"
                )


def record_demonstrations(mentor, env: DrivingEnv, n_steps: int, extra_meta: Optional[dict] = None) -> DemoDataset:
    """Roll the mentor in continuous-control mode and record reward-carrying
    tuples (s, a, r, s', a_next, done) for warmup."""
    obs_buf, act_buf, rew_buf, nxt_buf, nxt_act_buf, done_buf = [], [], [], [], [], []
    ep_records: List[dict] = []
    obs = env.reset()
    mentor.reset_episode()
    ep = {"return": 0.0, "success": 0.0, "cost": 0.0}
    pending = None  # previous record waiting for its next_act
    for t in range(n_steps):
        a = mentor.action(env.world, t) if hasattr(mentor, "action") else mentor(env.world, t)
        if pending is not None:
            pending["next_act"] = a.as_array()
            _flush(pending, obs_buf, act_buf, rew_buf, nxt_buf, nxt_act_buf, done_buf)
        out = env.step(a)
        pending = {
            "obs": obs,
            "act": a.as_array(),
            "reward": out.eval_reward,
            "next_obs": out.next_obs,
            "next_act": np.zeros(2),
            "done": out.done,
        }
        ep["return"] += out.eval_reward
        ep["cost"] += out.eval_cost
        obs = out.next_obs
        if out.done:
            ep["success"] = 1.0 if out.done_reason.value == "destination" else 0.0
            ep_records.append(dict(ep))
            ep = {"return": 0.0, "success": 0.0, "cost": 0.0}
            _flush(pending, obs_buf, act_buf, rew_buf, nxt_buf, nxt_act_buf, done_buf)
            pending = None
            obs = env.reset()
            mentor.reset_episode()
    if pending is not None:
        _flush(pending, obs_buf, act_buf, rew_buf, nxt_buf, nxt_act_buf, done_buf)

    meta = {
        "mentor": getattr(mentor, "kind", "callable"),
        "steps": n_steps,
        "episodes": ep_records,
        "scenario_seeds": [c.seed for c in env.scenarios],
        "config_hash": hashlib.sha256(repr(env.scenarios).encode()).hexdigest()[:16],
    }
    meta.update(extra_meta or {})
    n = len(obs_buf)
    od, ad = env.obs_dim, 2
    return DemoDataset(
        np.asarray(obs_buf, np.float32).reshape(n, od),
        np.asarray(act_buf, np.float32).reshape(n, ad),
        np.asarray(rew_buf, np.float64).reshape(n),
        np.asarray(nxt_buf, np.float32).reshape(n, od),
        np.asarray(nxt_act_buf, np.float32).reshape(n, ad),
        np.asarray(done_buf, np.uint8).reshape(n),
        meta,
    )


def _flush(rec, obs_buf, act_buf, rew_buf, nxt_buf, nxt_act_buf, done_buf):
    obs_buf.append(np.asarray(rec["obs"], np.float32))
    act_buf.append(np.asarray(rec["act"], np.float32))
    rew_buf.append(rec["reward"])
    nxt_buf.append(np.asarray(rec["next_obs"], np.float32))
    nxt_act_buf.append(np.asarray(rec["next_act"], np.float32))
    done_buf.append(1 if rec["done"] else 0)


def record_expert_rollout(policy: Callable, env_factory: Callable, n_steps: int, cfg, rng: RngHandle) -> DemoDataset:
    """Expert-policy warmup source: roll out a callable policy(world) -> Action."""

    class _CallableMentor:
        kind = "expert_policy"

        def reset_episode(self):
            pass

        def action(self, world, step):
            return policy(world)

    env = env_factory()
    return record_demonstrations(_CallableMentor(), env, n_steps, {"source": "expert_policy"})
