import sys
import time

import numpy as np
import torch

torch.set_num_threads(2)
t0 = time.time()
from mentordrive.experiments import (
    desk_run_config,
    desk_split,
    physics_eval_policy,
    prepare_warmup,
    train_and_eval,
)
from mentordrive.evaluation import evaluate
from mentordrive.mentors import mentor_preset
from mentordrive.world import SimParams

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 25000
cfg = desk_run_config(seed=0)
train_sc, test_sc = desk_split(20, 20)
params = SimParams.from_run_config(cfg)
phys = evaluate(physics_eval_policy, test_sc, params=params)["aggregate"]
print(f"physics: success {phys['success_rate']:.2f} return {phys['episodic_return']:.1f} dist {phys['travel_distance']:.0f}", flush=True)
ens, ds = prepare_warmup(cfg, train_sc)
eps = ds.meta["episodes"]
print(f"[{time.time()-t0:.0f}s] demos success {sum(e['success'] for e in eps)/len(eps):.2f}", flush=True)
res = train_and_eval(cfg, ens, mentor_preset("professional"), train_sc, test_sc, total_steps=steps, label="pilot")
t = res.test
print(f"[{time.time()-t0:5.0f}s] PE {steps}: success {t['success_rate']:.2f} return {t['episodic_return']:.1f} viol {t['safety_violation']:.2f} dist {t['travel_distance']:.0f} vel {t['mean_velocity_kmh']:.1f}")
print("train viol:", res.train_safety_violations)
print("takeover rate:", [round(r, 2) for r in res.takeover_rate_curve[::25]])
print("value tk rate:", [round(r, 2) for r in res.value_takeover_rate_curve[::25]])
rs = [r.data.get("episode_return_mean") for r in res.records if r.data.get("episode_return_mean") is not None]
print("train ep return:", [round(r) for r in rs[::12]])
sr = [r.data.get("success_rate") for r in res.records if r.data.get("success_rate") is not None]
print("train success:", [round(r, 2) for r in sr[::12]])
