import json

import numpy as np
import pytest

from mentordrive.core import Action, ConfigError
from mentordrive.evaluation import (
    EpisodeMetrics,
    TabularMdp,
    aggregate,
    check_bounds_thm1_thm2,
    check_contraction,
    check_theorem3,
    enumerate_return,
    enumerate_return_literal,
    evaluate,
    export_learning_curves,
    random_mdp,
    rank_policies,
    run_episode,
    scenario_split,
)
from mentordrive.traffic import physics_policy
from mentordrive.world import ScenarioConfig, SimParams


def idle_policy(obs, world):
    return Action(0.0, 0.0)


def physics(obs, world):
    return physics_policy(world)


def test_idle_policy_metrics():
    sc = ScenarioConfig(seed=1, traffic_density=0.0, obstacle_rate=0.0, map_length=300)
    m = run_episode(idle_policy, sc, SimParams(horizon=120))
    assert m.episodic_return == 0.0
    assert not m.success
    assert m.travel_distance == pytest.approx(0.0, abs=1e-9)
    assert m.done_reason == "horizon"


def test_return_equals_stepwise_sum():
    from mentordrive.world import generate_scenario, step

    sc = ScenarioConfig(seed=4, traffic_density=0.5, obstacle_rate=0.0, map_length=300)
    m = run_episode(physics, sc, SimParams())
    w = generate_scenario(sc)
    total = 0.0
    while not w.terminal:
        total += step(w, physics_policy(w), SimParams()).eval_reward
    assert m.episodic_return == total


def test_physics_succeeds_on_clear_straight_roads():
    scenes = [
        ScenarioConfig(
            seed=s, traffic_density=0.0, obstacle_rate=0.0, map_length=300,
            segment_kinds={"straight": 1.0},
        )
        for s in range(6)
    ]
    res = evaluate(physics, scenes, params=SimParams())
    assert res["aggregate"]["success_rate"] == 1.0
    assert res["aggregate"]["safety_violation"] == 0.0


def test_aggregate_permutation_invariant():
    def m(r):
        return EpisodeMetrics(r, False, 0.0, 10.0, 20.0, 0, "horizon", 5)

    eps = [m(1.0), m(2.0), m(5.0)]
    a1 = aggregate(eps)
    a2 = aggregate(list(reversed(eps)))
    assert a1 == a2


def test_aggregate_empty_rejected():
    with pytest.raises(ConfigError):
        aggregate([])
    with pytest.raises(ConfigError):
        evaluate(idle_policy, [], params=SimParams())


def test_success_requires_destination():
    with pytest.raises(ValueError):
        EpisodeMetrics(1.0, True, 0.0, 1.0, 1.0, 0, "horizon", 3)


def test_rank_policies_stage_order():
    def res(ret, succ, viol, dist, vel, ovt):
        return {
            "aggregate": {
                "episodic_return": ret,
                "success_rate": succ,
                "safety_violation": viol,
                "travel_distance": dist,
                "mean_velocity_kmh": vel,
                "overtake_count": ovt,
            }
        }

    # b wins stage I outright
    order = rank_policies({"a": res(100, 0.5, 1, 100, 20, 0), "b": res(300, 0.9, 5, 50, 10, 0)})
    assert order[0] == "b"
    # tie through stages I и II, stage III decides by overtakes
    order = rank_policies(
        {"a": res(200, 0.8, 1.0, 100, 20, 1), "b": res(200, 0.8, 1.0, 100, 20, 9)}
    )
    assert order[0] == "b"
    # lower safety violation wins stage II on a stage-I tie
    order = rank_policies(
        {"a": res(200, 0.8, 3.0, 100, 20, 5), "b": res(200, 0.8, 0.5, 100, 20, 0)}
    )
    assert order[0] == "b"


def test_scenario_split_disjoint_deterministic():
    tr1, te1 = scenario_split(10, 10)
    tr2, te2 = scenario_split(10, 10)
    assert [s.seed for s in tr1] == [s.seed for s in tr2]
    assert [s.seed for s in te1] == [s.seed for s in te2]
    assert set(s.seed for s in tr1).isdisjoint(s.seed for s in te1)


def test_export_learning_curves(tmp_path):
    metrics = tmp_path / "metrics.jsonl"
    rows = [
        {"iteration": 1, "env_steps": 100, "takeover_count": 3, "takeover_rate": 0.03,
         "value_takeover_count": 1, "value_takeover_rate": 0.33,
         "train_safety_violations": 0.0, "episode_return_mean": 12.5,
         "success_rate": 0.0, "violations_window": 0.0, "takeover_cost": 1.2},
    ]
    metrics.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    out = tmp_path / "curves.csv"
    export_learning_curves(metrics, out)
    lines = out.read_text().strip().splitlines()
    assert len(lines) == 2
    assert lines[0].startswith("iteration,env_steps")
    assert "12.5" in lines[1]


# --- tabular oracles ---------------------------------------------------------


def test_enumeration_oracles_agree():
    rng = np.random.default_rng(3)
    for _ in range(10):
        mdp = random_mdp(rng, 4, 2, 0.9, 4)
        pi = rng.integers(0, 2, size=4)
        flow = enumerate_return(mdp, lambda t, s: int(pi[s]))
        literal = enumerate_return_literal(mdp, lambda t, s: int(pi[s]))
        assert flow == pytest.approx(literal, abs=1e-12)


def test_theorem3_identical_policies_equal_returns():
    rng = np.random.default_rng(4)
    mdp = random_mdp(rng, 5, 2, 0.9, 4)
    pi = rng.integers(0, 2, size=5)
    rep = check_theorem3(mdp, pi, pi)
    assert rep["holds"] and rep["equality"]
    assert rep["j_human"] == pytest.approx(rep["j_phy"], abs=1e-12)
    assert rep["j_hybrid"] == pytest.approx(rep["j_human"], abs=1e-9)


def test_theorem3_strict_improvement_case():
    # two states; action 0 gives reward in state 0 only, action 1 in state 1
    # only. A policy good in one state is bad in the other; the per-state
    # switch beats both.
    P = np.zeros((2, 2, 2))
    P[:, :, :] = 0.5  # both actions randomise the next state
    R = np.array([[1.0, 0.0], [0.0, 1.0]])
    mu = np.array([0.5, 0.5])
    mdp = TabularMdp(P, R, mu, 0.9, 3)
    pi_human = np.array([0, 0])  # right in state 0, wrong in state 1
    pi_phy = np.array([1, 1])  # wrong in state 0, right in state 1
    rep = check_theorem3(mdp, pi_human, pi_phy)
    assert rep["holds"]
    assert rep["j_hybrid"] > max(rep["j_human"], rep["j_phy"]) + 0.1
    assert not rep["equality"]


def test_bounds_switch_never_and_always():
    rng = np.random.default_rng(5)
    mdp = random_mdp(rng, 5, 3, 0.9, 5)
    pi_h = rng.dirichlet(np.ones(3), size=5)
    pi_av = rng.dirichlet(np.ones(3), size=5)
    never = check_bounds_thm1_thm2(mdp, pi_h, pi_av, np.zeros(5, dtype=int))
    assert never["holds"]
    assert never["beta"] == 0.0
    assert never["d_gap_l1"] == pytest.approx(0.0, abs=1e-9)
    always = check_bounds_thm1_thm2(mdp, pi_h, pi_av, np.ones(5, dtype=int))
    assert always["holds"]
    assert always["beta"] == pytest.approx(1.0, abs=1e-12)
    assert always["j_mix"] == pytest.approx(always["j_human"], abs=1e-9)


def test_bounds_identical_policies_zero_denominator_guard():
    rng = np.random.default_rng(6)
    mdp = random_mdp(rng, 4, 2, 0.9, 5)
    pi = rng.dirichlet(np.ones(2), size=4)
    rep = check_bounds_thm1_thm2(mdp, pi, pi.copy(), np.array([1, 0, 1, 0]))
    assert rep["holds"]


def test_contraction_report_fields():
    rng = np.random.default_rng(7)
    mdp = random_mdp(rng, 6, 3, 0.95, 5)
    rep = check_contraction(mdp, rng)
    assert rep["holds"] and rep["ratio"] <= 0.95 + 1e-8
    assert rep["fixed_point_norm"] <= 1e-8
