"""Command-line entry points: warmup, train, eval, record-demos,
oracle-check, and sweep. Flag defaults mirror the standard configuration
table; run directories are self-describing (re-running eval on one needs no
extra flags)."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from .core import ConfigError, RunConfig, TakeoverSource, seed_all
from .ensemble import EnsembleQ, WarmupSource, warmup_train
from .evaluation import (
    check_bounds_thm1_thm2,
    check_contraction,
    check_theorem3,
    evaluate,
    export_learning_curves,
    random_mdp,
    scenario_split,
)
from .experiments import (
    desk_scenario,
    mentor_eval_policy,
    physics_eval_policy,
    policy_eval_fn,
    prepare_warmup,
    sweep_epsilon,
    sweep_warmup_steps,
)
from .mentors import DatasetError, DemoDataset, SyntheticMentor, mentor_preset, record_demonstrations
from .nets import read_checkpoint
from .trainer import Trainer, TrainVariant, build_trainer_state
from .traffic import physics_policy
from .world import DrivingEnv, ScenarioConfig, SimParams

EXIT_USAGE = 2


def _load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    return RunConfig.from_file(path)


def _scenario_sets(args, cfg: RunConfig):
    base = desk_scenario(obstacle_rich=not getattr(args, "easy", False))
    base.checkpoint_spacing = getattr(args, "checkpoint_spacing", base.checkpoint_spacing)
    return scenario_split(args.train_scenes, args.test_scenes, base, salt="desk")


def _add_scene_flags(p):
    p.add_argument("--train-scenes", type=int, default=20, help="training scene count (default 20)")
    p.add_argument("--test-scenes", type=int, default=20, help="test scene count (default 20)")
    p.add_argument("--easy", action="store_true", help="obstacle-free scenario mix")


def cmd_warmup(args) -> int:
    cfg = _load_run_config(args.config)
    handle = seed_all(cfg.seed)
    train_sc, _ = _scenario_sets(args, cfg)
    params = SimParams.from_run_config(cfg)

    if args.source == "expert":
        mentor = SyntheticMentor(mentor_preset("professional"), handle.spawn("expert"), continuous=True)
        env = DrivingEnv(train_sc, params)
        dataset = record_demonstrations(mentor, env, cfg.warmup_steps, {"phase": "warmup"})
        print(f"expert rollout: {len(dataset)} transitions over {len(dataset.meta['episodes'])} episodes")
    else:
        if not os.path.exists(args.source):
            print(f"error: demonstration source {args.source!r} not found", file=sys.stderr)
            return EXIT_USAGE
        try:
            dataset = DemoDataset.load(args.source)
        except DatasetError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE
        print(f"loaded dataset: {len(dataset)} transitions")

    def progress(u, total, loss):
        print(f"  warmup update {u}/{total}  td-loss {loss:.4f}")

    ens = warmup_train(
        WarmupSource("human_demonstration", dataset=dataset, steps=cfg.warmup_steps),
        cfg,
        handle.spawn("warmup"),
        progress=progress,
    )
    ens.save(args.out, {"config_hash": cfg.hash()})
    print(f"ensemble ({ens.k} members) saved to {args.out}; final td-loss {ens.final_loss:.4f}")
    return 0


def _write_run_dir(run_dir, cfg: RunConfig, train_sc, test_sc):
    os.makedirs(run_dir, exist_ok=True)
    cfg.to_file(os.path.join(run_dir, "config.yaml"))
    with open(os.path.join(run_dir, "scenes.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "train_seeds": [s.seed for s in train_sc],
                "test_seeds": [s.seed for s in test_sc],
                "base": {
                    "lane_count": train_sc[0].lane_count,
                    "traffic_density": train_sc[0].traffic_density,
                    "obstacle_rate": train_sc[0].obstacle_rate,
                    "map_length": train_sc[0].map_length,
                    "lane_width": train_sc[0].lane_width,
                    "checkpoint_spacing": train_sc[0].checkpoint_spacing,
                    "segment_kinds": train_sc[0].segment_kinds,
                },
            },
            fh,
            indent=2,
        )


def _read_run_dir_scenes(run_dir):
    with open(os.path.join(run_dir, "scenes.json"), "r", encoding="utf-8") as fh:
        data = json.load(fh)
    base = data["base"]
    train = [ScenarioConfig(seed=s, **base) for s in data["train_seeds"]]
    test = [ScenarioConfig(seed=s, **base) for s in data["test_seeds"]]
    return train, test


class LiveBridgeHook:
    """Paces the training loop at the simulator tick, broadcasts state frames,
    and pauses while no client is attached (or a pause was requested)."""

    def __init__(self, server, dt: float = 0.1, require_client: bool = True):
        self.server = server
        self.dt = dt
        self.require_client = require_client
        self._next = None
        self._last_heartbeat = 0.0

    def __call__(self, trainer):
        while self.require_client and (not self.server.has_client or self.server.paused.is_set()):
            now = time.monotonic()
            if now - self._last_heartbeat > 2.0:
                state = "paused" if self.server.paused.is_set() else "waiting for client"
                print(f"[bridge] {state} on port {self.server.port} (step {trainer.state.step})")
                self._last_heartbeat = now
            time.sleep(0.05)
            self._next = None
        now = time.monotonic()
        if self._next is None:
            self._next = now
        if now < self._next:
            time.sleep(self._next - now)
        self._next += self.dt
        source_flag = (TakeoverSource.NONE, TakeoverSource.HUMAN, TakeoverSource.PHYSICS).index(
            trainer.last_source
        )
        self.server.broadcast_state(
            trainer.state.step, trainer.env.world, source_flag, trainer.last_intervened
        )


def cmd_train(args) -> int:
    from .bridge import BridgeServer
    from .mentors import HumanMentorAdapter

    cfg = _load_run_config(args.config)
    if not os.path.exists(args.warmup):
        print(f"error: warmup checkpoint {args.warmup!r} not found", file=sys.stderr)
        return EXIT_USAGE
    ensemble = EnsembleQ.load(args.warmup)
    train_sc, test_sc = _scenario_sets(args, cfg)
    _write_run_dir(args.run_dir, cfg, train_sc, test_sc)
    env = DrivingEnv(train_sc, SimParams.from_run_config(cfg))

    server = None
    tick_hook = None
    if args.mentor == "human":
        server = BridgeServer(port=args.port)
        print(f"[bridge] listening on ws://127.0.0.1:{server.port}")
        mentor = HumanMentorAdapter(server.latch)
        tick_hook = LiveBridgeHook(server, require_client=not args.no_wait)
    else:
        mentor = SyntheticMentor(mentor_preset(args.mentor), seed_all(cfg.seed).spawn("mentor"))

    variant = TrainVariant(arbitration=not args.no_arbitration, label="cli")
    trainer = Trainer(
        cfg, env, mentor, ensemble,
        physics_fn=lambda world: physics_policy(world),
        run_dir=args.run_dir, variant=variant, tick_hook=tick_hook,
    )
    if args.resume:
        meta = trainer.resume(args.resume)
        print(f"resumed from {args.resume} at step {meta['step']}")
    try:
        trainer.train(args.steps)
    finally:
        trainer.close()
        if server is not None:
            server.close()
    export_learning_curves(
        os.path.join(args.run_dir, "metrics.jsonl"), os.path.join(args.run_dir, "curves.csv")
    )
    print(f"run directory: {args.run_dir} ({trainer.state.iteration} iterations)")
    return 0


def _policy_from_checkpoint(path, cfg: RunConfig):
    header, _ = read_checkpoint(path)
    meta = header["meta"]
    state = build_trainer_state(
        cfg.with_overrides(hidden_sizes=tuple(meta["hidden_sizes"])), meta["obs_dim"], seed_all(0)
    )
    from .nets import load_checkpoint

    load_checkpoint(path, {"policy": state.policy})
    return state.policy


def cmd_eval(args) -> int:
    if args.run_dir:
        cfg = RunConfig.from_file(os.path.join(args.run_dir, "config.yaml"))
        train_sc, test_sc = _read_run_dir_scenes(args.run_dir)
        ckpt = args.checkpoint or os.path.join(args.run_dir, "ckpt_final.bin")
        out_dir = args.run_dir
    else:
        cfg = _load_run_config(args.config)
        train_sc, test_sc = _scenario_sets(args, cfg)
        ckpt = args.checkpoint
        out_dir = args.out or "."
    scenes = train_sc if args.split == "train" else test_sc
    params = SimParams.from_run_config(cfg)

    if args.physics_baseline:
        policy, label = physics_eval_policy, "physics"
    else:
        if ckpt is None or not os.path.exists(ckpt):
            print(f"error: checkpoint {ckpt!r} not found", file=sys.stderr)
            return EXIT_USAGE
        policy, label = policy_eval_fn(_policy_from_checkpoint(ckpt, cfg)), "learned"

    result = evaluate(policy, scenes, n_episodes=args.episodes, params=params)
    agg = result["aggregate"]
    os.makedirs(out_dir, exist_ok=True)
    report_json = os.path.join(out_dir, f"eval_{label}_{args.split}.json")
    with open(report_json, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "label": label,
                "split": args.split,
                "aggregate": agg,
                "per_scene": [vars(e) for e in result["episodes"]],
            },
            fh,
            indent=2,
            sort_keys=True,
        )
    txt = os.path.join(out_dir, f"eval_{label}_{args.split}.txt")
    with open(txt, "w", encoding="utf-8") as fh:
        fh.write(f"policy: {label}  split: {args.split}  episodes: {agg['episodes']}\n")
        fh.write(
            f"Stage I   return {agg['episodic_return']:.2f} +- {agg['episodic_return_std']:.2f}"
            f"  success {agg['success_rate']:.2f}\n"
        )
        fh.write(
            f"Stage II  safety violation {agg['safety_violation']:.2f} (total {agg['safety_violation_total']:.0f})"
            f"  distance {agg['travel_distance']:.1f} m\n"
        )
        fh.write(
            f"Stage III velocity {agg['mean_velocity_kmh']:.1f} km/h  overtakes {agg['overtake_count']:.2f}"
            f" (total {agg['overtake_total']:.0f})\n"
        )
    print(open(txt, "r", encoding="utf-8").read().rstrip())
    print(f"reports: {report_json}, {txt}")
    return 0


def cmd_record_demos(args) -> int:
    cfg = _load_run_config(args.config)
    train_sc, _ = _scenario_sets(args, cfg)
    mentor = SyntheticMentor(
        mentor_preset(args.mentor), seed_all(cfg.seed).spawn("demo-mentor"), continuous=True
    )
    env = DrivingEnv(train_sc, SimParams.from_run_config(cfg))
    ds = record_demonstrations(mentor, env, args.steps, {"mentor_preset": args.mentor})
    ds.save(args.out)
    ds.export_text(args.out + ".txt", limit=200)
    eps = ds.meta["episodes"]
    sr = sum(e["success"] for e in eps) / max(1, len(eps))
    print(
        f"recorded {len(ds)} transitions, {len(eps)} episodes, success rate {sr:.2f}"
        f" -> {args.out} (+ .txt preview)"
    )
    return 0


def cmd_oracle_check(args) -> int:
    rng = np.random.default_rng(args.seed)
    n = args.instances
    failures = 0

    ok = 0
    for _ in range(n):
        mdp = random_mdp(rng, int(rng.integers(2, 7)), 2, 0.9, int(rng.integers(1, 6)))
        pi_h = rng.integers(0, 2, size=mdp.n_states)
        pi_p = rng.integers(0, 2, size=mdp.n_states)
        ok += check_theorem3(mdp, pi_h, pi_p)["holds"]
    print(f"hybrid dominance oracle: {ok}/{n} {'PASS' if ok == n else 'FAIL'}")
    failures += ok != n

    ok = 0
    for _ in range(n):
        S, A = int(rng.integers(2, 9)), int(rng.integers(2, 4))
        mdp = random_mdp(rng, S, A, float(rng.uniform(0.7, 0.95)), 5)
        pi_h = rng.dirichlet(np.ones(A), size=S)
        pi_av = rng.dirichlet(np.ones(A), size=S)
        switch = rng.integers(0, 2, size=S)
        ok += check_bounds_thm1_thm2(mdp, pi_h, pi_av, switch)["holds"]
    print(f"mixing bound checks: {ok}/{n} {'PASS' if ok == n else 'FAIL'}")
    failures += ok != n

    ok = 0
    for _ in range(n):
        S, A = int(rng.integers(2, 11)), int(rng.integers(2, 5))
        mdp = random_mdp(rng, S, A, float(rng.uniform(0.5, 0.99)), 5)
        ok += check_contraction(mdp, rng)["holds"]
    print(f"reward-free contraction: {ok}/{n} {'PASS' if ok == n else 'FAIL'}")
    failures += ok != n
    return 1 if failures else 0


def cmd_sweep(args) -> int:
    cfg = _load_run_config(args.config)
    if args.kind == "eps":
        values = [float(v) for v in args.values.split(",")]
        table = sweep_epsilon(cfg, values, args.steps)
        rows = [
            {"mentor": k[0], "epsilon_select": k[1], **{m: v[m] for m in ("episodic_return", "success_rate", "safety_violation")}}
            for k, v in table.items()
        ]
    else:
        values = [int(v) for v in args.values.split(",")]
        table = sweep_warmup_steps(cfg, values, args.steps)
        rows = [
            {"warmup_steps": k, **{m: v[m] for m in ("episodic_return", "success_rate", "safety_violation")}}
            for k, v in table.items()
        ]
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(rows, fh, indent=2, sort_keys=True)
    for r in rows:
        print(json.dumps(r, sort_keys=True))
    print(f"sweep table -> {args.out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mentordrive",
        description="2D driving simulator with mentor arbitration and reward-free intervention learning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("warmup", help="train the value ensemble from demonstrations or an expert rollout")
    p.add_argument("--config", help="run config yaml (defaults = standard table)")
    p.add_argument("--source", required=True, help="demo dataset path, or 'expert' for a scripted rollout")
    p.add_argument("--out", required=True, help="ensemble checkpoint path")
    _add_scene_flags(p)
    p.set_defaults(func=cmd_warmup)

    p = sub.add_parser("train", help="run the intervention-learning loop")
    p.add_argument("--config", help="run config yaml")
    p.add_argument("--warmup", required=True, help="ensemble checkpoint from the warmup step")
    p.add_argument("--mentor", default="professional", help="synthetic preset (professional|amateur) or 'human'")
    p.add_argument("--steps", type=int, default=30_000, help="environment steps (default 30000)")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--port", type=int, default=0, help="bridge port for human mentor (0 = ephemeral)")
    p.add_argument("--no-wait", action="store_true", help="do not block waiting for a UI client")
    p.add_argument("--no-arbitration", action="store_true", help="always execute mentor actions on takeover")
    p.add_argument("--resume", help="checkpoint to resume from")
    _add_scene_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="deterministic evaluation without intervention")
    p.add_argument("--run-dir", help="self-describing run directory")
    p.add_argument("--checkpoint", help="explicit checkpoint path")
    p.add_argument("--config", help="run config yaml (when no run dir)")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--physics-baseline", action="store_true", help="evaluate the physics policy, no checkpoint")
    p.add_argument("--out", help="output directory (when no run dir)")
    _add_scene_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("record-demos", help="record a mentor demonstration dataset")
    p.add_argument("--config")
    p.add_argument("--mentor", default="professional")
    p.add_argument("--steps", type=int, default=10_000)
    p.add_argument("--out", required=True)
    _add_scene_flags(p)
    p.set_defaults(func=cmd_record_demos)

    p = sub.add_parser("oracle-check", help="run the tabular theorem and contraction suites")
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("sweep", help="sensitivity sweeps (selection threshold, warmup size)")
    p.add_argument("--kind", choices=("eps", "warmup"), required=True)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--config")
    p.add_argument("--out", default="sweep.json")
    p.set_defaults(func=cmd_sweep)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
