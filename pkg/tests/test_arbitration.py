import math

import numpy as np
import pytest

from mentordrive.arbitration import (
    ArbitrationResult,
    TakeoverSignal,
    arbitrate,
    first_step_gate,
    intervention_cost,
)
from mentordrive.core import Action, ConfigError, TakeoverSource, seed_all
from mentordrive.ensemble import EnsembleQ
from mentordrive.evaluation import check_theorem3, random_mdp

from test_ensemble import constant_gap_ensemble


def zero_ensemble():
    import torch

    ens = EnsembleQ(1, 2, 2, (4,), seed_all(0))
    with torch.no_grad():
        for m in ens.members:
            for p in m.parameters():
                p.zero_()
    return ens


PHY = Action(-1.0, 0.0)


def phy_fn(world):
    return PHY


def test_signal_invariant():
    with pytest.raises(ConfigError):
        TakeoverSignal(True, None)


def test_inactive_passthrough():
    a_av = Action(0.2, 0.4)
    res = arbitrate(np.zeros(1), None, a_av, TakeoverSignal(False), None, phy_fn, 0.5)
    assert res.executed == a_av
    assert res.source is TakeoverSource.NONE
    assert not res.intervened and res.value_gap == 0.0


def test_zero_gap_routes_to_physics():
    res = arbitrate(
        np.zeros(1), None, Action(0, 0), TakeoverSignal(True, Action(1.0, 0.0)),
        zero_ensemble(), phy_fn, 0.5,
    )
    assert res.source is TakeoverSource.PHYSICS
    assert res.executed == PHY
    assert res.intervened


def test_large_gap_routes_to_human():
    ens = constant_gap_ensemble([(2.0, 1.0), (2.0, 1.0)])  # gap = 1.0 for (1,0) vs (-1,0)
    human = Action(1.0, 0.0)
    res = arbitrate(np.zeros(1), None, Action(0, 0), TakeoverSignal(True, human), ens, phy_fn, 0.5)
    assert res.source is TakeoverSource.HUMAN
    assert res.executed == human
    assert res.value_gap == pytest.approx(1.0, abs=1e-12)


def test_missing_ensemble_is_configuration_error():
    with pytest.raises(ConfigError):
        arbitrate(
            np.zeros(1), None, Action(0, 0), TakeoverSignal(True, Action(1, 0)), None, phy_fn, 0.5
        )


def test_epsilon_limits():
    ens = constant_gap_ensemble([(2.0, 1.0), (2.0, 1.0)])
    sig = TakeoverSignal(True, Action(1.0, 0.0))
    huge = 1e18
    assert arbitrate(np.zeros(1), None, Action(0, 0), sig, ens, phy_fn, huge).source is TakeoverSource.PHYSICS
    assert arbitrate(np.zeros(1), None, Action(0, 0), sig, ens, phy_fn, -huge).source is TakeoverSource.HUMAN


def test_arbitrate_output_always_bounded():
    ens = constant_gap_ensemble([(5.0, -5.0), (3.0, 1.0)])
    rng = np.random.default_rng(3)
    for _ in range(50):
        sig = TakeoverSignal(bool(rng.integers(0, 2)), Action(*rng.uniform(-1, 1, 2)))
        res = arbitrate(np.zeros(1), None, Action(*rng.uniform(-1, 1, 2)), sig, ens, phy_fn, 0.5)
        assert -1 <= res.executed.steer <= 1 and -1 <= res.executed.throttle <= 1
        assert res.intervened == (res.source is not TakeoverSource.NONE)


def test_cosine_cost_exact_cases():
    a = Action(0.5, 0.5)
    assert intervention_cost(a, a) == 0.0
    assert intervention_cost(Action(0.5, 0.5), Action(-0.5, -0.5)) == pytest.approx(2.0, abs=1e-15)
    assert intervention_cost(Action(1, 0), Action(0, 1)) == pytest.approx(1.0, abs=1e-15)


def test_cosine_cost_zero_norm_defined_zero():
    assert intervention_cost(Action(0, 0), Action(1, 1)) == 0.0
    assert intervention_cost(Action(1, 1), Action(0, 0)) == 0.0


def test_cosine_cost_range():
    rng = np.random.default_rng(5)
    for _ in range(200):
        c = intervention_cost(Action(*rng.uniform(-1, 1, 2)), Action(*rng.uniform(-1, 1, 2)))
        assert 0.0 <= c <= 2.0


def test_first_step_gate_table():
    assert first_step_gate(False, True, 1.3) == 1.3
    assert first_step_gate(True, True, 1.3) == 0.0
    assert first_step_gate(True, False, 99.0) == 0.0
    assert first_step_gate(False, False, 99.0) == 0.0


def test_hybrid_dominance_with_exact_values():
    """Arbitration driven by exact action values dominates the physics
    policy on random small MDPs (threshold 0)."""
    rng = np.random.default_rng(12)
    for _ in range(30):
        mdp = random_mdp(rng, int(rng.integers(2, 7)), 2, 0.9, int(rng.integers(1, 6)))
        pi_h = rng.integers(0, 2, size=mdp.n_states)
        pi_p = rng.integers(0, 2, size=mdp.n_states)
        rep = check_theorem3(mdp, pi_h, pi_p)
        assert rep["holds"]
        if np.array_equal(pi_h, pi_p):
            assert rep["equality"]
