"""Experiment orchestration shared by the CLI and the acceptance suite:
warmup -> train -> evaluate pipelines, ablation variants, and sensitivity
sweeps, all at a desk-scale footprint.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .core import RunConfig, RngHandle, seed_all
from .ensemble import EnsembleQ, WarmupSource, warmup_train
from .evaluation import evaluate, scenario_split
from .mentors import (
    DemoDataset,
    SyntheticMentor,
    SyntheticMentorConfig,
    mentor_preset,
    record_demonstrations,
)
from .nets import deterministic_action
from .trainer import Trainer, TrainVariant
from .traffic import physics_policy
from .world import DrivingEnv, ScenarioConfig, SimParams


def desk_run_config(seed: int = 0, **overrides) -> RunConfig:
    """Small-footprint training configuration for CPU-bound experiment runs;
    algorithmic constants keep their standard defaults."""
    base = dict(
        seed=seed,
        hidden_sizes=(128, 128),
        batch_size=256,
        steps_per_iteration=60,
        horizon=400,
        learning_rate=3e-4,
        buffer_capacity=40_000,
    )
    base.update(overrides)
    return RunConfig(**base)


def desk_scenario(obstacle_rich: bool = True) -> ScenarioConfig:
    return ScenarioConfig(
        lane_count=3,
        traffic_density=0.6,
        obstacle_rate=1.2 if obstacle_rich else 0.0,
        map_length=280.0,
        segment_kinds={"straight": 4.0, "curve": 0.6, "ramp": 0.4},
    )


def desk_split(n_train: int = 20, n_test: int = 20, obstacle_rich: bool = True):
    return scenario_split(n_train, n_test, desk_scenario(obstacle_rich), salt="desk")


def physics_eval_policy(obs, world):
    return physics_policy(world)


def policy_eval_fn(policy_head) -> Callable:
    def fn(obs, world):
        return deterministic_action(policy_head, obs)

    return fn


def mentor_eval_policy(mentor: SyntheticMentor) -> Callable:
    def fn(obs, world):
        return mentor.base_action(world)

    return fn


# Warmup demonstrations carry extra exploration noise: the value estimators
# must rank off-demonstration actions (brake-and-wait vs steer-around), which
# a near-noise-free demonstration set leaves unconstrained.
WARMUP_COVERAGE_SIGMA = 0.2


def prepare_warmup(
    cfg: RunConfig,
    scenarios: List[ScenarioConfig],
    mentor_cfg: Optional[SyntheticMentorConfig] = None,
    cache_path: Optional[str] = None,
    k_override: Optional[int] = None,
    updates: Optional[int] = None,
) -> Tuple[EnsembleQ, DemoDataset]:
    """Record a demonstration run with the oracle mentor and train the value
    ensemble on it. Caches the ensemble checkpoint when a path is given."""
    handle = seed_all(cfg.seed)
    mentor_cfg = mentor_cfg or SyntheticMentorConfig(action_noise_sigma=WARMUP_COVERAGE_SIGMA)
    mentor = SyntheticMentor(mentor_cfg, handle.spawn("warmup-mentor"), continuous=True)
    env = DrivingEnv(scenarios, SimParams.from_run_config(cfg))
    dataset = record_demonstrations(mentor, env, cfg.warmup_steps, {"phase": "warmup"})
    if cache_path is not None and os.path.exists(cache_path):
        return EnsembleQ.load(cache_path), dataset
    if updates is None:
        updates = max(3000, 2 * cfg.warmup_steps)
    ens = warmup_train(
        WarmupSource("human_demonstration", dataset=dataset, steps=cfg.warmup_steps),
        cfg,
        handle.spawn("warmup"),
        updates=updates,
        k_override=k_override,
    )
    if cache_path is not None:
        ens.save(cache_path)
    return ens, dataset


@dataclass
class ExperimentResult:
    label: str
    seed: int
    train_safety_violations: float
    takeover_rate_curve: List[float]
    value_takeover_rate_curve: List[float]
    test: dict
    records: list


def train_and_eval(
    cfg: RunConfig,
    ensemble: Optional[EnsembleQ],
    mentor_cfg: SyntheticMentorConfig,
    train_scenarios: List[ScenarioConfig],
    test_scenarios: List[ScenarioConfig],
    total_steps: int,
    variant: Optional[TrainVariant] = None,
    run_dir: Optional[str] = None,
    label: str = "run",
) -> ExperimentResult:
    handle = seed_all(cfg.seed)
    params = SimParams.from_run_config(cfg)
    env = DrivingEnv(train_scenarios, params)
    mentor = SyntheticMentor(mentor_cfg, handle.spawn("mentor"))
    trainer = Trainer(
        cfg,
        env,
        mentor,
        ensemble,
        physics_fn=lambda world: physics_policy(world),
        run_dir=run_dir,
        variant=variant,
    )
    state = trainer.train(total_steps)
    trainer.close()
    test = evaluate(policy_eval_fn(state.policy), test_scenarios, params=params)
    recs = trainer.records
    return ExperimentResult(
        label=label,
        seed=cfg.seed,
        train_safety_violations=recs[-1].train_safety_violations if recs else 0.0,
        takeover_rate_curve=[r.takeover_rate for r in recs],
        value_takeover_rate_curve=[r.value_takeover_rate for r in recs],
        test=test["aggregate"],
        records=recs,
    )


ABLATION_LABELS = (
    "full",
    "reduced_takeover",
    "no_cosine_cost",
    "no_intervention_minimization",
    "no_ensemble",
    "physics_only",
)


def ablation_setup(label: str, cfg: RunConfig, base_mentor: SyntheticMentorConfig):
    """(cfg, mentor_cfg, variant, needs_single_member) for one ablation row."""
    variant = TrainVariant(label=label)
    mentor_cfg = base_mentor
    single = False
    if label == "reduced_takeover":
        mentor_cfg = replace(base_mentor, tau_ttc=1.0, d_margin=0.1, stall_steps=80)
    elif label == "no_cosine_cost":
        variant = TrainVariant(cost_mode="fixed_one", label=label)
    elif label == "no_intervention_minimization":
        cfg = cfg.with_overrides(beta_weight=0.0)
    elif label == "no_ensemble":
        single = True
    elif label not in ("full", "physics_only"):
        raise ValueError(f"unknown ablation {label!r}")
    return cfg, mentor_cfg, variant, single


def run_ablations(
    cfg: RunConfig,
    total_steps: int,
    labels: Tuple[str, ...] = ABLATION_LABELS,
    n_train: int = 12,
    n_test: int = 12,
    run_dir: Optional[str] = None,
) -> Dict[str, dict]:
    """Short seeded runs of the ablation variants plus the physics baseline;
    returns a comparison-table mapping label -> aggregate test metrics."""
    train_sc, test_sc = desk_split(n_train, n_test)
    base_mentor = mentor_preset("professional")
    results: Dict[str, dict] = {}
    ens_cache: Dict[int, EnsembleQ] = {}
    params = SimParams.from_run_config(cfg)
    for label in labels:
        if label == "physics_only":
            results[label] = evaluate(physics_eval_policy, test_sc, params=params)["aggregate"]
            continue
        run_cfg, mentor_cfg, variant, single = ablation_setup(label, cfg, base_mentor)
        k = 1 if single else None
        key = 1 if single else run_cfg.ensemble_size
        if key not in ens_cache:
            ens_cache[key], _ = prepare_warmup(run_cfg, train_sc, k_override=k)
        res = train_and_eval(
            run_cfg,
            ens_cache[key],
            mentor_cfg,
            train_sc,
            test_sc,
            total_steps,
            variant=variant,
            run_dir=os.path.join(run_dir, label) if run_dir else None,
            label=label,
        )
        row = dict(res.test)
        row["train_safety_violations"] = res.train_safety_violations
        results[label] = row
    return results


def sweep_epsilon(cfg: RunConfig, values, total_steps: int, mentor_names=("professional", "amateur")):
    """Sensitivity of the value-takeover threshold across mentor quality."""
    train_sc, test_sc = desk_split(10, 10)
    out = {}
    ens, _ = prepare_warmup(cfg, train_sc)
    for name in mentor_names:
        for eps in values:
            run_cfg = cfg.with_overrides(epsilon_select=float(eps))
            res = train_and_eval(
                run_cfg, ens, mentor_preset(name), train_sc, test_sc, total_steps,
                label=f"eps={eps}/{name}",
            )
            out[(name, float(eps))] = res.test
    return out


def sweep_warmup_steps(cfg: RunConfig, values, total_steps: int):
    """Sensitivity of warmup dataset size."""
    train_sc, test_sc = desk_split(10, 10)
    out = {}
    for w in values:
        run_cfg = cfg.with_overrides(warmup_steps=int(w))
        ens, _ = prepare_warmup(run_cfg, train_sc)
        res = train_and_eval(
            run_cfg, ens, mentor_preset("professional"), train_sc, test_sc, total_steps,
            label=f"warmup={w}",
        )
        out[int(w)] = res.test
    return out
