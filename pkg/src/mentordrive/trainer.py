"""Reward-free training loop: replay of partial demonstrations, proxy value
updates with a conservative term on intervened samples, an intervention-cost
critic, and entropy-regularised policy optimisation.

The replay record carries no environment reward or cost; episode returns and
safety violations are accumulated for the metrics stream only and never touch
a loss graph.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from .arbitration import ArbitrationResult, TakeoverSignal, arbitrate, first_step_gate, intervention_cost
from .core import Action, ConfigError, RunConfig, RngHandle, TakeoverSource, Transition, seed_all
from .ensemble import EnsembleQ
from .nets import (
    DTYPE,
    GaussianPolicyHead,
    Mlp,
    assert_finite_params,
    clip_grad_norm,
    load_checkpoint,
    polyak_update,
    sample_action,
    save_checkpoint,
)


class ReplayBuffer:
    """Uniform ring buffer of partial demonstrations. Stores observations,
    both actions, the intervention flag/cost/source and done — nothing else."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int = 2):
        self.capacity = int(capacity)
        self.obs = np.zeros((capacity, obs_dim), dtype=np.float64)
        self.act_av = np.zeros((capacity, act_dim), dtype=np.float64)
        self.act_hybrid = np.zeros((capacity, act_dim), dtype=np.float64)
        self.intervened = np.zeros(capacity, dtype=bool)
        self.cost = np.zeros(capacity, dtype=np.float64)
        self.next_obs = np.zeros((capacity, obs_dim), dtype=np.float64)
        self.done = np.zeros(capacity, dtype=bool)
        self.source = np.zeros(capacity, dtype=np.uint8)
        self.size = 0
        self.head = 0

    def add(self, tr: Transition):
        i = self.head
        self.obs[i] = tr.obs
        self.act_av[i] = tr.action_av.as_array()
        self.act_hybrid[i] = tr.action_hybrid.as_array()
        self.intervened[i] = tr.intervened
        self.cost[i] = tr.intervention_cost
        self.next_obs[i] = tr.next_obs
        self.done[i] = tr.done
        self.source[i] = (TakeoverSource.NONE, TakeoverSource.HUMAN, TakeoverSource.PHYSICS).index(
            tr.takeover_source
        )
        self.head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __len__(self):
        return self.size

    def sample(self, batch: int, rng: np.random.Generator) -> Dict[str, torch.Tensor]:
        if self.size == 0:
            raise ConfigError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch)
        return {
            "obs": torch.as_tensor(self.obs[idx], dtype=DTYPE),
            "act_av": torch.as_tensor(self.act_av[idx], dtype=DTYPE),
            "act_hybrid": torch.as_tensor(self.act_hybrid[idx], dtype=DTYPE),
            "intervened": torch.as_tensor(self.intervened[idx].astype(np.float64), dtype=DTYPE),
            "cost": torch.as_tensor(self.cost[idx], dtype=DTYPE),
            "next_obs": torch.as_tensor(self.next_obs[idx], dtype=DTYPE),
            "done": torch.as_tensor(self.done[idx].astype(np.float64), dtype=DTYPE),
        }


class ScalarParam(torch.nn.Module):
    """Single learnable scalar (used for the entropy temperature log-alpha)."""

    def __init__(self, value: float):
        super().__init__()
        self.value = torch.nn.Parameter(torch.tensor(float(value), dtype=DTYPE))

    def descriptor(self):
        return {"kind": "scalar"}


@dataclass
class TrainerState:
    policy: GaussianPolicyHead
    q1: Mlp
    q2: Mlp
    q1_target: Mlp
    q2_target: Mlp
    q_int: Mlp
    log_alpha: ScalarParam
    policy_opt: torch.optim.Adam
    q_opt: torch.optim.Adam
    q_int_opt: torch.optim.Adam
    alpha_opt: torch.optim.Adam
    step: int = 0
    iteration: int = 0
    grad_steps: int = 0
    prev_intervened: bool = False

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.value.detach().exp())


def build_trainer_state(cfg: RunConfig, obs_dim: int, rng: RngHandle, act_dim: int = 2) -> TrainerState:
    hidden = list(cfg.hidden_sizes)
    policy = GaussianPolicyHead(obs_dim, hidden, act_dim, seed=rng.seed_for("policy"))
    q1 = Mlp([obs_dim + act_dim, *hidden, 1], seed=rng.seed_for("q1"))
    q2 = Mlp([obs_dim + act_dim, *hidden, 1], seed=rng.seed_for("q2"))
    q1_t = Mlp([obs_dim + act_dim, *hidden, 1], seed=rng.seed_for("q1"))
    q2_t = Mlp([obs_dim + act_dim, *hidden, 1], seed=rng.seed_for("q2"))
    q1_t.load_state_dict(q1.state_dict())
    q2_t.load_state_dict(q2.state_dict())
    for t in (q1_t, q2_t):
        for p in t.parameters():
            p.requires_grad_(False)
    q_int = Mlp([obs_dim + act_dim, *hidden, 1], seed=rng.seed_for("q_int"))
    log_alpha = ScalarParam(0.0)
    lr = cfg.learning_rate
    return TrainerState(
        policy=policy,
        q1=q1,
        q2=q2,
        q1_target=q1_t,
        q2_target=q2_t,
        q_int=q_int,
        log_alpha=log_alpha,
        policy_opt=torch.optim.Adam(policy.parameters(), lr=lr),
        q_opt=torch.optim.Adam(list(q1.parameters()) + list(q2.parameters()), lr=lr),
        q_int_opt=torch.optim.Adam(q_int.parameters(), lr=lr),
        alpha_opt=torch.optim.Adam(log_alpha.parameters(), lr=lr),
    )


def _q(net: Mlp, obs: torch.Tensor, act: torch.Tensor) -> torch.Tensor:
    return net(torch.cat([obs, act], dim=-1)).squeeze(-1)


def proxy_q_loss(
    state: TrainerState,
    batch: Dict[str, torch.Tensor],
    cfg: RunConfig,
    next_noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """TD term toward a reward-free entropy-regularised target plus the
    conservative intervention term, scaled by cql_temperature."""
    obs, nxt = batch["obs"], batch["next_obs"]
    half = 0.5 if cfg.half_td_target else 1.0
    with torch.no_grad():
        a_next, logp_next = state.policy.sample(nxt, noise=next_noise)
        if cfg.twin_critics:
            tq = torch.minimum(_q(state.q1_target, nxt, a_next), _q(state.q2_target, nxt, a_next))
        else:
            tq = _q(state.q1_target, nxt, a_next)
        alpha = state.log_alpha.value.exp()
        y = cfg.gamma * (1.0 - batch["done"]) * (tq - alpha * logp_next)

    critics = (state.q1, state.q2) if cfg.twin_critics else (state.q1,)
    loss = torch.zeros((), dtype=DTYPE)
    for critic in critics:
        td = (y - half * _q(critic, obs, batch["act_hybrid"])) ** 2
        conservative = batch["intervened"] * (
            _q(critic, obs, batch["act_av"]) - _q(critic, obs, batch["act_hybrid"])
        )
        loss = loss + (td + cfg.cql_temperature * conservative).mean()
    return loss


def intervention_q_loss(
    state: TrainerState,
    batch: Dict[str, torch.Tensor],
    cfg: RunConfig,
    next_noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """TD regression of the intervention-cost critic toward the gated cost
    plus the discounted bootstrap at the agent's next action."""
    obs, nxt = batch["obs"], batch["next_obs"]
    with torch.no_grad():
        a_next, _ = state.policy.sample(nxt, noise=next_noise)
        boot = _q(state.q_int, nxt, a_next)
        target = batch["cost"] + cfg.gamma * (1.0 - batch["done"]) * boot
    pred = _q(state.q_int, obs, batch["act_av"])
    return ((pred - target) ** 2).mean()


def policy_objective(
    state: TrainerState,
    batch: Dict[str, torch.Tensor],
    cfg: RunConfig,
    noise: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """J(theta) = E[psi*Qhat(s, a) - alpha*log pi(a|s) - beta*Qint(s, a)] with
    a freshly reparameterised. Maximised (the caller negates for descent)."""
    obs = batch["obs"]
    a, logp = state.policy.sample(obs, noise=noise)
    if cfg.twin_critics:
        q = torch.minimum(_q(state.q1, obs, a), _q(state.q2, obs, a))
    else:
        q = _q(state.q1, obs, a)
    alpha = state.log_alpha.value.exp().detach()
    q_int = _q(state.q_int, obs, a)
    return (cfg.psi * q - alpha * logp - cfg.beta_weight * q_int).mean()


def alpha_loss(state: TrainerState, logp: torch.Tensor, cfg: RunConfig) -> torch.Tensor:
    """Dual ascent toward the target entropy. The configured value is the
    magnitude: a squashed policy on [-1,1]^2 cannot exceed log(4) nats, so the
    usable target is -|value| (the usual -dim(A) convention for continuous
    control)."""
    target = -abs(cfg.target_entropy)
    return -(state.log_alpha.value * (logp + target).detach()).mean()


def gradient_step(state: TrainerState, buffer: ReplayBuffer, cfg: RunConfig, rng: np.random.Generator):
    batch = buffer.sample(min(cfg.batch_size, len(buffer)), rng)
    n = batch["obs"].shape[0]
    act_dim = batch["act_av"].shape[1]

    def draw():
        return torch.as_tensor(rng.standard_normal((n, act_dim)), dtype=DTYPE)

    q_loss = proxy_q_loss(state, batch, cfg, next_noise=draw())
    state.q_opt.zero_grad()
    q_loss.backward()
    clip_grad_norm(list(state.q1.parameters()) + list(state.q2.parameters()), cfg.grad_clip_norm)
    state.q_opt.step()

    qi_loss = intervention_q_loss(state, batch, cfg, next_noise=draw())
    state.q_int_opt.zero_grad()
    qi_loss.backward()
    clip_grad_norm(state.q_int.parameters(), cfg.grad_clip_norm)
    state.q_int_opt.step()

    pol_noise = draw()
    j = policy_objective(state, batch, cfg, noise=pol_noise)
    state.policy_opt.zero_grad()
    (-j).backward()
    clip_grad_norm(state.policy.parameters(), cfg.grad_clip_norm)
    state.policy_opt.step()

    with torch.no_grad():
        _, logp = state.policy.sample(batch["obs"], noise=pol_noise)
    a_loss = alpha_loss(state, logp, cfg)
    state.alpha_opt.zero_grad()
    a_loss.backward()
    state.alpha_opt.step()

    polyak_update(state.q1_target, state.q1, cfg.tau)
    polyak_update(state.q2_target, state.q2, cfg.tau)
    state.grad_steps += 1

    for label, mod in (("policy", state.policy), ("q1", state.q1), ("q2", state.q2), ("q_int", state.q_int)):
        assert_finite_params(mod, label)
    return {
        "q_loss": float(q_loss.detach()),
        "q_int_loss": float(qi_loss.detach()),
        "policy_objective": float(j.detach()),
        "alpha": state.alpha,
    }


@dataclass
class TrainVariant:
    """Experiment knobs for ablations; the default is the full algorithm."""

    arbitration: bool = True  # False: always execute the mentor action on takeover
    cost_mode: str = "cosine"  # or "fixed_one"
    label: str = "full"


@dataclass
class IterationRecord:
    iteration: int
    env_steps: int
    takeover_count: int
    takeover_rate: float
    value_takeover_count: int
    value_takeover_rate: float
    train_safety_violations: float
    data: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {
            "iteration": self.iteration,
            "env_steps": self.env_steps,
            "takeover_count": self.takeover_count,
            "takeover_rate": self.takeover_rate,
            "value_takeover_count": self.value_takeover_count,
            "value_takeover_rate": self.value_takeover_rate,
            "train_safety_violations": self.train_safety_violations,
        }
        payload.update(self.data)
        return json.dumps(payload, sort_keys=True)


class Trainer:
    """Runs the intervention-learning loop against an environment and a
    mentor, writing an append-only metrics stream and periodic checkpoints."""

    def __init__(
        self,
        cfg: RunConfig,
        env,
        mentor,
        ensemble: Optional[EnsembleQ],
        physics_fn: Callable,
        run_dir: Optional[str] = None,
        variant: Optional[TrainVariant] = None,
        tick_hook: Optional[Callable] = None,
    ):
        self.cfg = cfg
        self.env = env
        self.mentor = mentor
        self.ensemble = ensemble
        self.physics_fn = physics_fn
        self.run_dir = run_dir
        self.variant = variant or TrainVariant()
        self.tick_hook = tick_hook
        self.handle = seed_all(cfg.seed)
        self.state = build_trainer_state(cfg, env.obs_dim, self.handle.spawn("nets"))
        self.buffer = ReplayBuffer(cfg.buffer_capacity, env.obs_dim)
        self.explore_rng = self.handle.stream("exploration")
        self.batch_rng = self.handle.stream("batches")
        self.records: List[IterationRecord] = []
        self.last_source = TakeoverSource.NONE
        self.last_intervened = False
        self._metrics_fh = None
        if run_dir:
            os.makedirs(run_dir, exist_ok=True)
            self._metrics_fh = open(os.path.join(run_dir, "metrics.jsonl"), "a", encoding="utf-8")

    def close(self):
        if self._metrics_fh:
            self._metrics_fh.close()
            self._metrics_fh = None

    def _emit(self, rec: IterationRecord):
        self.records.append(rec)
        if self._metrics_fh:
            self._metrics_fh.write(rec.to_json() + "\n")
            self._metrics_fh.flush()

    def _checkpoint(self, path):
        modules = {
            "policy": self.state.policy,
            "q1": self.state.q1,
            "q2": self.state.q2,
            "q1_target": self.state.q1_target,
            "q2_target": self.state.q2_target,
            "q_int": self.state.q_int,
            "log_alpha": self.state.log_alpha,
        }
        optimizers = {
            "policy": self.state.policy_opt,
            "q": self.state.q_opt,
            "q_int": self.state.q_int_opt,
            "alpha": self.state.alpha_opt,
        }
        meta = {
            "step": self.state.step,
            "iteration": self.state.iteration,
            "grad_steps": self.state.grad_steps,
            "prev_intervened": self.state.prev_intervened,
            "obs_dim": self.env.obs_dim,
            "hidden_sizes": list(self.cfg.hidden_sizes),
            "explore_rng": self.explore_rng.bit_generator.state,
            "batch_rng": self.batch_rng.bit_generator.state,
        }
        save_checkpoint(path, modules, optimizers, meta)

    def resume(self, path):
        modules = {
            "policy": self.state.policy,
            "q1": self.state.q1,
            "q2": self.state.q2,
            "q1_target": self.state.q1_target,
            "q2_target": self.state.q2_target,
            "q_int": self.state.q_int,
            "log_alpha": self.state.log_alpha,
        }
        optimizers = {
            "policy": self.state.policy_opt,
            "q": self.state.q_opt,
            "q_int": self.state.q_int_opt,
            "alpha": self.state.alpha_opt,
        }
        meta = load_checkpoint(path, modules, optimizers)
        self.state.step = int(meta["step"])
        self.state.iteration = int(meta["iteration"])
        self.state.grad_steps = int(meta.get("grad_steps", 0))
        self.state.prev_intervened = bool(meta.get("prev_intervened", False))
        if "explore_rng" in meta:
            self.explore_rng.bit_generator.state = meta["explore_rng"]
        if "batch_rng" in meta:
            self.batch_rng.bit_generator.state = meta["batch_rng"]
        return meta

    def train(self, total_steps: int) -> TrainerState:
        cfg = self.cfg
        obs = self.env.reset()
        if hasattr(self.mentor, "reset_episode"):
            self.mentor.reset_episode()
        self.state.prev_intervened = False

        window = dict(
            steps=0, takeovers=0, human=0, cost=0.0, violations=0.0, returns=[], successes=[]
        )
        total_violations = 0.0
        episodes = 0
        ep_return = 0.0
        target = self.state.step + total_steps

        while self.state.step < target:
            if self.tick_hook is not None:
                self.tick_hook(self)
            a_av, _ = sample_action(self.state.policy, obs, rng=self.explore_rng)
            signal = self.mentor.poll(obs, self.env.world, a_av, self.state.step)
            if self.variant.arbitration:
                res = arbitrate(
                    obs, self.env.world, a_av, signal, self.ensemble, self.physics_fn,
                    cfg.epsilon_select,
                )
            else:
                if signal.active:
                    res = ArbitrationResult(signal.human_action, TakeoverSource.HUMAN, True, 0.0)
                else:
                    res = ArbitrationResult(a_av, TakeoverSource.NONE, False, 0.0)

            if res.intervened:
                raw_cost = (
                    intervention_cost(a_av, res.executed)
                    if self.variant.cost_mode == "cosine"
                    else 1.0
                )
            else:
                raw_cost = 0.0
            gated = first_step_gate(self.state.prev_intervened, res.intervened, raw_cost)

            out = self.env.step(res.executed)
            self.buffer.add(
                Transition(
                    obs=obs,
                    action_av=a_av,
                    action_hybrid=res.executed,
                    intervened=res.intervened,
                    intervention_cost=gated,
                    next_obs=out.next_obs,
                    done=out.done,
                    takeover_source=res.source,
                )
            )

            # bookkeeping only: rewards/costs never reach a loss
            ep_return += out.eval_reward
            window["violations"] += out.eval_cost
            total_violations += out.eval_cost
            window["steps"] += 1
            window["cost"] += gated
            if res.intervened:
                window["takeovers"] += 1
                if res.source is TakeoverSource.HUMAN:
                    window["human"] += 1

            self.state.prev_intervened = res.intervened
            self.last_source = res.source
            self.last_intervened = res.intervened
            self.state.step += 1
            if out.done:
                episodes += 1
                window["returns"].append(ep_return)
                window["successes"].append(1.0 if out.done_reason.value == "destination" else 0.0)
                ep_return = 0.0
                obs = self.env.reset()
                if hasattr(self.mentor, "reset_episode"):
                    self.mentor.reset_episode()
                self.state.prev_intervened = False
            else:
                obs = out.next_obs

            if self.state.step % 100 == 0 and self.state.step >= cfg.steps_before_learning:
                for _ in range(cfg.steps_per_iteration):
                    gradient_step(self.state, self.buffer, cfg, self.batch_rng)
                self.state.iteration += 1
                n_tk = window["takeovers"]
                rec = IterationRecord(
                    iteration=self.state.iteration,
                    env_steps=self.state.step,
                    takeover_count=n_tk,
                    takeover_rate=n_tk / max(1, window["steps"]),
                    value_takeover_count=window["human"],
                    value_takeover_rate=window["human"] / n_tk if n_tk else 0.0,
                    train_safety_violations=total_violations,
                    data={
                        "violations_window": window["violations"],
                        "episodes_completed": episodes,
                        "takeover_cost": window["cost"],
                        "episode_return_mean": (
                            sum(window["returns"]) / len(window["returns"])
                            if window["returns"]
                            else None
                        ),
                        "success_rate": (
                            sum(window["successes"]) / len(window["successes"])
                            if window["successes"]
                            else None
                        ),
                        "alpha": self.state.alpha,
                        "buffer_size": len(self.buffer),
                    },
                )
                self._emit(rec)
                window = dict(
                    steps=0, takeovers=0, human=0, cost=0.0, violations=0.0, returns=[], successes=[]
                )
                if self.run_dir and self.state.iteration % cfg.checkpoint_every == 0:
                    self._checkpoint(os.path.join(self.run_dir, f"ckpt_{self.state.iteration:06d}.bin"))

        if self.run_dir:
            self._checkpoint(os.path.join(self.run_dir, "ckpt_final.bin"))
        return self.state
