"""Evaluation harness: episode metrics, three-stage comparison reports,
train/test scenario splits, tabular MDP oracles for the policy-mixing bounds
and hybrid-dominance property, and the reward-free contraction check.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import Action, ConfigError, KMH_TO_MPS, _stream_seed
from .world import DoneReason, DrivingEnv, ScenarioConfig, SimParams, generate_scenario, step


@dataclass
class EpisodeMetrics:
    episodic_return: float
    success: bool
    safety_violation_count: float
    travel_distance: float
    mean_velocity_kmh: float
    overtake_count: int
    done_reason: str
    steps: int

    def __post_init__(self):
        if self.success and self.done_reason != DoneReason.DESTINATION.value:
            raise ValueError("success requires done_reason == destination")


STAGES = (
    ("episodic_return", "success_rate"),
    ("safety_violation", "travel_distance"),
    ("mean_velocity_kmh", "overtake_count"),
)
LOWER_IS_BETTER = {"safety_violation"}


def run_episode(policy: Callable, scenario: ScenarioConfig, params: SimParams) -> EpisodeMetrics:
    """Roll a deterministic policy(obs, world) -> Action with no mentor."""
    from .lidar import observe

    world = generate_scenario(scenario)
    obs = observe(world, params.v_max_mps)
    total_r, total_c, dist, overtakes = 0.0, 0.0, 0.0, 0
    speeds: List[float] = []
    t = 0
    while True:
        action = policy(obs, world)
        out = step(world, action, params)
        total_r += out.eval_reward
        total_c += out.eval_cost
        dist += out.info["delta_distance"]
        overtakes += out.info["overtakes"]
        speeds.append(out.info["speed_mps"])
        obs = out.next_obs
        t += 1
        if out.done:
            break
    return EpisodeMetrics(
        episodic_return=total_r,
        success=out.done_reason is DoneReason.DESTINATION,
        safety_violation_count=total_c,
        travel_distance=dist,
        mean_velocity_kmh=(sum(speeds) / len(speeds)) / KMH_TO_MPS if speeds else 0.0,
        overtake_count=overtakes,
        done_reason=out.done_reason.value,
        steps=t,
    )


def aggregate(episodes: Sequence[EpisodeMetrics]) -> Dict[str, float]:
    """Permutation-invariant aggregation over episodes. Safety violation is
    reported both as mean per episode (test style) and total (train style)."""
    if not episodes:
        raise ConfigError("cannot aggregate an empty episode list")
    return {
        "episodes": len(episodes),
        "episodic_return": float(np.mean([e.episodic_return for e in episodes])),
        "episodic_return_std": float(np.std([e.episodic_return for e in episodes])),
        "success_rate": float(np.mean([1.0 if e.success else 0.0 for e in episodes])),
        "safety_violation": float(np.mean([e.safety_violation_count for e in episodes])),
        "safety_violation_total": float(np.sum([e.safety_violation_count for e in episodes])),
        "travel_distance": float(np.mean([e.travel_distance for e in episodes])),
        "mean_velocity_kmh": float(np.mean([e.mean_velocity_kmh for e in episodes])),
        "overtake_count": float(np.mean([e.overtake_count for e in episodes])),
        "overtake_total": float(np.sum([e.overtake_count for e in episodes])),
    }


def evaluate(
    policy: Callable,
    scenario_set: Sequence[ScenarioConfig],
    n_episodes: Optional[int] = None,
    params: Optional[SimParams] = None,
) -> dict:
    """Evaluate a deterministic policy over a scenario set; returns aggregate
    metrics, the per-episode rows, and a stage-ordered report."""
    if not scenario_set:
        raise ConfigError("empty scenario set")
    params = params or SimParams()
    n = n_episodes or len(scenario_set)
    episodes = [run_episode(policy, scenario_set[i % len(scenario_set)], params) for i in range(n)]
    agg = aggregate(episodes)
    report = {
        "stage_i": {k: agg[k] for k in ("episodic_return", "success_rate")},
        "stage_ii": {k: agg[k] for k in ("safety_violation", "travel_distance")},
        "stage_iii": {k: agg[k] for k in ("mean_velocity_kmh", "overtake_count")},
    }
    return {"aggregate": agg, "episodes": episodes, "report": report}


def rank_policies(results: Dict[str, dict], tie_rel: float = 0.05) -> List[str]:
    """Order policies by the three-stage strategy: compare Stage I metrics
    first, moving to later stages only to break ties (relative difference
    below tie_rel counts as a tie)."""

    def stage_cmp(a: dict, b: dict) -> int:
        for stage in STAGES:
            score = 0
            for m in stage:
                va, vb = a[m], b[m]
                lo = -1 if m in LOWER_IS_BETTER else 1
                scale = max(abs(va), abs(vb), 1e-9)
                if abs(va - vb) / scale > tie_rel:
                    score += lo if va > vb else -lo
            if score != 0:
                return score
        return 0

    import functools

    names = list(results)
    aggs = {n: results[n]["aggregate"] for n in names}
    return sorted(names, key=functools.cmp_to_key(lambda x, y: -stage_cmp(aggs[x], aggs[y])))


def scenario_split(
    n_train: int,
    n_test: int,
    base: Optional[ScenarioConfig] = None,
    salt: str = "scenes",
) -> Tuple[List[ScenarioConfig], List[ScenarioConfig]]:
    """Disjoint deterministic train/test scenario sets."""
    from dataclasses import replace

    base = base or ScenarioConfig()
    train = [replace(base, seed=_stream_seed(0, f"{salt}/train/{i}") % 2**31) for i in range(n_train)]
    test = [replace(base, seed=_stream_seed(0, f"{salt}/test/{i}") % 2**31) for i in range(n_test)]
    return train, test


def export_learning_curves(metrics_path, csv_path):
    """CSV export of the per-iteration panels: return, success, violations,
    takeover count/rate, takeover cost."""
    cols = (
        "iteration",
        "env_steps",
        "episode_return_mean",
        "success_rate",
        "violations_window",
        "train_safety_violations",
        "takeover_count",
        "takeover_rate",
        "value_takeover_count",
        "value_takeover_rate",
        "takeover_cost",
    )
    with open(metrics_path, "r", encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([r.get(c, "") for c in cols])


# ---------------------------------------------------------------------------
# tabular MDP oracles


@dataclass
class TabularMdp:
    P: np.ndarray  # (S, A, S), row-stochastic
    R: np.ndarray  # (S, A)
    mu: np.ndarray  # (S,)
    gamma: float
    horizon: int

    def __post_init__(self):
        S, A, S2 = self.P.shape
        if S != S2 or self.R.shape != (S, A) or self.mu.shape != (S,):
            raise ConfigError("inconsistent MDP tensor shapes")
        if not np.allclose(self.P.sum(axis=2), 1.0, atol=1e-12):
            raise ConfigError("transition rows must sum to 1")

    @property
    def n_states(self):
        return self.P.shape[0]

    @property
    def n_actions(self):
        return self.P.shape[1]


def random_mdp(rng: np.random.Generator, n_s: int, n_a: int, gamma: float, horizon: int) -> TabularMdp:
    P = rng.dirichlet(np.ones(n_s), size=(n_s, n_a))
    R = rng.uniform(0.0, 1.0, size=(n_s, n_a))
    mu = rng.dirichlet(np.ones(n_s))
    return TabularMdp(P, R, mu, gamma, horizon)


def enumerate_return(mdp: TabularMdp, policy: Callable[[int, int], int]) -> float:
    """Finite-horizon expected discounted return of a deterministic
    (time, state) -> action policy, by exact forward flow over all
    trajectory prefixes."""
    S = mdp.n_states
    weight = mdp.mu.copy()  # probability mass currently at each state
    total = 0.0
    for t in range(mdp.horizon + 1):
        acts = np.array([policy(t, s) for s in range(S)])
        total += (mdp.gamma ** t) * float(np.sum(weight * mdp.R[np.arange(S), acts]))
        if t < mdp.horizon:
            step_P = mdp.P[np.arange(S), acts]  # (S, S)
            weight = weight @ step_P
    return total


def enumerate_return_literal(mdp: TabularMdp, policy: Callable[[int, int], int]) -> float:
    """Literal trajectory enumeration (exponential; small instances only).
    Cross-checks the forward-flow oracle."""
    S = mdp.n_states
    total = 0.0

    def rec(t: int, s: int, prob: float, acc: float):
        nonlocal total
        a = policy(t, s)
        acc = acc + (mdp.gamma ** t) * mdp.R[s, a]
        if t == mdp.horizon:
            total += prob * acc
            return
        for s2 in range(S):
            p = mdp.P[s, a, s2]
            if p > 0.0:
                rec(t + 1, s2, prob * p, acc)

    for s0 in range(S):
        if mdp.mu[s0] > 0.0:
            rec(0, s0, mdp.mu[s0], 0.0)
    return total


def hybrid_policy_table(mdp: TabularMdp, pi_human: np.ndarray, pi_phy: np.ndarray):
    """Per-state choice between the two deterministic policies by exact
    finite-horizon action values (backward induction). Returns a
    (horizon+1, S) table of chosen actions indexed by time."""
    H, S = mdp.horizon, mdp.n_states
    V = np.zeros(S)
    choice = np.zeros((H + 1, S), dtype=int)
    for k in range(H + 1):  # k = steps remaining after this one
        q_h = mdp.R[np.arange(S), pi_human] + (mdp.gamma * mdp.P[np.arange(S), pi_human] @ V if k > 0 else 0.0)
        q_p = mdp.R[np.arange(S), pi_phy] + (mdp.gamma * mdp.P[np.arange(S), pi_phy] @ V if k > 0 else 0.0)
        take_human = q_h >= q_p
        choice[k] = np.where(take_human, pi_human, pi_phy)
        V = np.where(take_human, q_h, q_p)
    # choice[k] is the decision with k steps remaining; convert to time index
    return choice[::-1]


def check_theorem3(mdp: TabularMdp, pi_human: np.ndarray, pi_phy: np.ndarray, tol: float = 1e-9) -> dict:
    """Hybrid dominance: J(hybrid) >= max(J(human), J(phy)) >= J(phy), each
    return computed by the exhaustive-enumeration oracle."""
    table = hybrid_policy_table(mdp, pi_human, pi_phy)
    j_h = enumerate_return(mdp, lambda t, s: int(pi_human[s]))
    j_p = enumerate_return(mdp, lambda t, s: int(pi_phy[s]))
    j_hy = enumerate_return(mdp, lambda t, s: int(table[t, s]))
    chain = (j_hy >= max(j_h, j_p) - tol) and (max(j_h, j_p) >= j_p - tol)
    return {
        "j_human": j_h,
        "j_phy": j_p,
        "j_hybrid": j_hy,
        "holds": bool(chain),
        "equality": bool(abs(j_hy - max(j_h, j_p)) <= 1e-6),
    }


def _stationary_discounted(P_pi: np.ndarray, mu: np.ndarray, gamma: float) -> np.ndarray:
    """Normalised discounted state-visitation d = (1-gamma) * sum_t gamma^t P_t."""
    S = len(mu)
    return (1.0 - gamma) * np.linalg.solve(np.eye(S) - gamma * P_pi.T, mu)


def _policy_matrix(P: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """(S, S) state transition under stochastic policy pi (S, A)."""
    return np.einsum("sa,sat->st", pi, P)


def _exact_return(mdp: TabularMdp, pi: np.ndarray) -> float:
    P_pi = _policy_matrix(mdp.P, pi)
    r_pi = np.einsum("sa,sa->s", pi, mdp.R)
    V = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)
    return float(mdp.mu @ V)


def check_bounds_thm1_thm2(
    mdp: TabularMdp,
    pi_human: np.ndarray,
    pi_av: np.ndarray,
    switch: np.ndarray,
    tol: float = 1e-9,
) -> dict:
    """Numerical check of the state-distribution bound (mixing theorem) and
    the entropy-based return sandwich, with exact linear-algebra solves.

    The sandwich's sqrt(H - eps) term is evaluated through the proof's
    identity H - eps = E_{d_mix} KL(pi_human || pi_av)."""
    T = switch.astype(float)
    pi_mix = T[:, None] * pi_human + (1.0 - T[:, None]) * pi_av

    d_mix = _stationary_discounted(_policy_matrix(mdp.P, pi_mix), mdp.mu, mdp.gamma)
    d_av = _stationary_discounted(_policy_matrix(mdp.P, pi_av), mdp.mu, mdp.gamma)

    l1 = np.abs(pi_human - pi_av).sum(axis=1)
    denom = float(d_mix @ l1)
    beta = float(d_mix @ (T * l1)) / denom if denom > 1e-15 else 0.0
    lhs1 = float(np.abs(d_mix - d_av).sum())
    rhs1 = beta * mdp.gamma / (1.0 - mdp.gamma) * denom
    thm1_holds = lhs1 <= rhs1 + tol

    j_mix = _exact_return(mdp, pi_mix)
    j_h = _exact_return(mdp, pi_human)
    r_max = float(mdp.R.max())
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(pi_human > 0, np.log(np.where(pi_human > 0, pi_human, 1.0)), 0.0)
        ent = -np.sum(pi_human * logs, axis=1)
        kl_terms = np.where(
            pi_human > 0,
            pi_human * (logs - np.log(np.maximum(pi_av, 1e-300))),
            0.0,
        )
        kl = kl_terms.sum(axis=1)
    h_avg = float(d_mix @ ent)
    e_kl = float(d_mix @ kl)
    eps_term = h_avg - e_kl
    bound = math.sqrt(2.0) * (1.0 - beta) * r_max / (1.0 - mdp.gamma) ** 2 * math.sqrt(max(e_kl, 0.0))
    thm2_holds = (j_mix <= j_h + bound + tol) and (j_mix >= j_h - bound - tol)

    return {
        "beta": beta,
        "d_gap_l1": lhs1,
        "d_bound": rhs1,
        "thm1_holds": bool(thm1_holds),
        "j_mix": j_mix,
        "j_human": j_h,
        "entropy_avg": h_avg,
        "eps": eps_term,
        "return_bound": bound,
        "thm2_holds": bool(thm2_holds),
        "holds": bool(thm1_holds and thm2_holds),
    }


def reward_free_operator(mdp: TabularMdp, Q: np.ndarray) -> np.ndarray:
    """The reward-free proxy update Q <- gamma * P max_a' Q."""
    return mdp.gamma * np.einsum("sat,t->sa", mdp.P, Q.max(axis=1))


def check_contraction(mdp: TabularMdp, rng: np.random.Generator, tol: float = 1e-8) -> dict:
    """Sup-norm contraction with factor <= gamma and convergence to the
    all-zeros fixed point (iterated until the tolerance is reached)."""
    S, A = mdp.n_states, mdp.n_actions
    q1 = rng.uniform(-5, 5, size=(S, A))
    q2 = rng.uniform(-5, 5, size=(S, A))
    num = np.abs(reward_free_operator(mdp, q1) - reward_free_operator(mdp, q2)).max()
    den = np.abs(q1 - q2).max()
    ratio = num / den if den > 0 else 0.0
    q = q1
    # gamma^k * |q0| <= tol needs k ~ log(tol/|q0|)/log(gamma)
    max_iters = int(math.log(tol / max(np.abs(q).max(), 1.0)) / math.log(mdp.gamma)) + 10
    for _ in range(max_iters):
        q = reward_free_operator(mdp, q)
        if np.abs(q).max() <= tol:
            break
    return {
        "ratio": float(ratio),
        "contracts": bool(ratio <= mdp.gamma + tol),
        "fixed_point_norm": float(np.abs(q).max()),
        "converges": bool(np.abs(q).max() <= tol),
        "holds": bool(ratio <= mdp.gamma + tol and np.abs(q).max() <= tol),
    }
