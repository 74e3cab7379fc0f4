"""Ensemble of independently initialised Q estimators, trained once during a
reward-using warmup phase and frozen afterwards. Used to compare the expected
value of mentor vs physics actions at decision time."""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .core import Action, ConfigError, InvalidInputError, RngHandle
from .nets import DTYPE, Mlp, polyak_update


@dataclass
class WarmupSource:
    kind: str  # "human_demonstration" | "expert_policy"
    dataset: Optional[object] = None  # DemoDataset for human_demonstration
    policy: Optional[object] = None  # callable(world) -> Action for expert_policy
    steps: int = 10000

    def __post_init__(self):
        if self.kind not in ("human_demonstration", "expert_policy"):
            raise ConfigError(f"unknown warmup source kind {self.kind!r}")
        if self.steps <= 0:
            raise ConfigError("warmup steps must be > 0")


class EnsembleQ:
    """k same-architecture members with a shared target copy each. Queries
    return means over members; members differ only by init seed."""

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        k: int,
        hidden: Sequence[int],
        rng: RngHandle,
        allow_single: bool = False,
    ):
        if k < 2 and not allow_single:
            raise ConfigError(f"ensemble size must be >= 2, got {k}")
        if k < 1:
            raise ConfigError("ensemble size must be >= 1")
        self.obs_dim, self.act_dim, self.k = int(obs_dim), int(act_dim), int(k)
        self.hidden = tuple(hidden)
        self.members = [
            Mlp([obs_dim + act_dim, *hidden, 1], seed=rng.seed_for(f"ensemble/{i}"))
            for i in range(k)
        ]
        self.targets = [copy.deepcopy(m) for m in self.members]
        for t in self.targets:
            for p in t.parameters():
                p.requires_grad_(False)

    def parameters(self):
        for m in self.members:
            yield from m.parameters()

    def member_values(self, obs: torch.Tensor, act: torch.Tensor, use_target=False) -> torch.Tensor:
        """(k, batch) member estimates."""
        x = torch.cat([obs, act], dim=-1)
        nets = self.targets if use_target else self.members
        return torch.stack([m(x).squeeze(-1) for m in nets])

    def mean_q(self, obs: torch.Tensor, act: torch.Tensor, use_target=False) -> torch.Tensor:
        return self.member_values(obs, act, use_target).mean(dim=0)

    def spread(self, obs: torch.Tensor, act: torch.Tensor) -> torch.Tensor:
        return self.member_values(obs, act).std(dim=0)

    def polyak(self, tau: float):
        for t, m in zip(self.targets, self.members):
            polyak_update(t, m, tau)

    def q_scalar(self, obs: np.ndarray, action: Action) -> float:
        o = torch.as_tensor(obs, dtype=DTYPE).unsqueeze(0)
        a = torch.as_tensor(action.as_array(), dtype=DTYPE).unsqueeze(0)
        with torch.no_grad():
            return float(self.mean_q(o, a)[0])

    def save(self, path, extra_meta: Optional[dict] = None):
        from .nets import save_checkpoint

        modules = {f"member_{i}": m for i, m in enumerate(self.members)}
        modules.update({f"target_{i}": t for i, t in enumerate(self.targets)})
        meta = {
            "k": self.k,
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "hidden": list(self.hidden),
            "final_loss": getattr(self, "final_loss", None),
        }
        meta.update(extra_meta or {})
        save_checkpoint(path, modules, meta=meta)

    @classmethod
    def load(cls, path, rng: Optional[RngHandle] = None) -> "EnsembleQ":
        from .nets import load_checkpoint, read_checkpoint

        header, _ = read_checkpoint(path)
        meta = header["meta"]
        ens = cls(
            meta["obs_dim"],
            meta["act_dim"],
            meta["k"],
            meta["hidden"],
            rng or RngHandle(0),
            allow_single=True,
        )
        modules = {f"member_{i}": m for i, m in enumerate(ens.members)}
        modules.update({f"target_{i}": t for i, t in enumerate(ens.targets)})
        load_checkpoint(path, modules)
        ens.final_loss = meta.get("final_loss")
        return ens


def q_mean_gap(ens: EnsembleQ, obs: np.ndarray, a_human: Action, a_phy: Action) -> float:
    """Mean over members of Q(s, a_human) - Q(s, a_phy), evaluated at the
    concrete point actions available at decision time."""
    o = torch.as_tensor(np.asarray(obs), dtype=DTYPE).unsqueeze(0)
    ah = torch.as_tensor(a_human.as_array(), dtype=DTYPE).unsqueeze(0)
    ap = torch.as_tensor(a_phy.as_array(), dtype=DTYPE).unsqueeze(0)
    with torch.no_grad():
        vals = ens.member_values(torch.cat([o, o]), torch.cat([ah, ap]))
    return float((vals[:, 0] - vals[:, 1]).mean())


def warmup_train(
    src: WarmupSource,
    cfg,
    rng: RngHandle,
    env_factory=None,
    updates: Optional[int] = None,
    batch_size: Optional[int] = None,
    progress=None,
    k_override: Optional[int] = None,
) -> EnsembleQ:
    """Train the ensemble on reward-carrying transitions (the only phase that
    consumes environment reward). Loss: [y - Mean Q(s,a)]^2 with
    y = r + gamma * Mean Q_target(s', a' + N(0, sigma)), a' the recorded
    follow-up action (or a fresh expert rollout for expert_policy sources)."""
    from .mentors import DemoDataset, record_expert_rollout

    if src.kind == "human_demonstration":
        ds = src.dataset
        if ds is None or len(ds) == 0:
            raise ConfigError("human_demonstration warmup needs a non-empty dataset")
    else:
        if src.policy is None or env_factory is None:
            raise ConfigError("expert_policy warmup needs a policy and env_factory")
        ds = record_expert_rollout(src.policy, env_factory, src.steps, cfg, rng.spawn("expert-rollout"))

    obs_dim = ds.obs.shape[1]
    act_dim = ds.act.shape[1]
    k = k_override if k_override is not None else cfg.ensemble_size
    ens = EnsembleQ(
        obs_dim, act_dim, k, cfg.hidden_sizes, rng.spawn("ensemble-init"), allow_single=True
    )
    opt = torch.optim.Adam(list(ens.parameters()), lr=cfg.learning_rate)
    stream = rng.stream("warmup-train")
    n = len(ds)
    updates = updates if updates is not None else max(1, 4 * n // max(1, cfg.batch_size) * 8)
    batch = min(batch_size or cfg.batch_size, n)

    obs = torch.as_tensor(ds.obs, dtype=DTYPE)
    act = torch.as_tensor(ds.act, dtype=DTYPE)
    rew = torch.as_tensor(ds.reward, dtype=DTYPE)
    nxt = torch.as_tensor(ds.next_obs, dtype=DTYPE)
    nxt_act = torch.as_tensor(ds.next_act, dtype=DTYPE)
    done = torch.as_tensor(ds.done.astype(np.float64), dtype=DTYPE)

    last_loss = float("nan")
    for u in range(updates):
        idx = torch.as_tensor(stream.integers(0, n, size=batch))
        noise = torch.as_tensor(
            stream.normal(0.0, cfg.warmup_noise_sigma, size=(batch, act_dim)), dtype=DTYPE
        )
        a_next = torch.clamp(nxt_act[idx] + noise, -1.0, 1.0)
        with torch.no_grad():
            target_q = ens.mean_q(nxt[idx], a_next, use_target=True)
            y = rew[idx] + cfg.gamma * (1.0 - done[idx]) * target_q
        pred = ens.mean_q(obs[idx], act[idx])
        loss = ((y - pred) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        ens.polyak(cfg.tau)
        last_loss = float(loss.detach())
        if progress is not None and (u + 1) % max(1, updates // 10) == 0:
            progress(u + 1, updates, last_loss)
    ens.final_loss = last_loss
    return ens
