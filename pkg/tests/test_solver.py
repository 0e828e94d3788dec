import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipstop import solver
from ipstop.dists import appendix_uniform, custom_table, overlapping_poissonlike
from ipstop.errors import (BadParameters, NonIntervalStoppingSet, NotConverged, ObservationSpaceTooLarge)
from ipstop.model import Action, IntrusionPOMDP, RewardParams, TransitionModel

from oracles import grid_values, random_dx_model


@pytest.fixture(scope="module")
def appendix():
    pomdp = IntrusionPOMDP(appendix_uniform(), TransitionModel(0.2), RewardParams())
    return pomdp, solver.value_iteration(pomdp)


def _random_pomdp(seed):
    rng = np.random.default_rng(seed)
    return IntrusionPOMDP(random_dx_model(rng, width=int(rng.integers(2, 9))), TransitionModel(rng.uniform(0.05, 0.5)))


def test_value_at_examples():
    V = solver.ValueFunction(np.array([[0.0, 100.0]]))
    assert V(0.5) == 50.0
    V = solver.ValueFunction(np.array([[0.0, 100.0], [60.0, 40.0]]))
    assert V(0.0) == 60.0
    assert V(np.array([0.0, 1.0])).tolist() == [60.0, 100.0]


def test_appendix_solution(appendix):
    pomdp, V = appendix
    assert V.converged
    assert V(1.0) == 100.0
    assert V(0.0) == pytest.approx(-17.5, abs=1e-9)
    # derived by hand: the four envelope pieces after convergence
    assert V.vectors == pytest.approx(np.array([[-17.5, -127.5], [-25.0, -65.0], [-50.0, 10.0], [-100.0, 100.0]]))
    a = solver.stopping_set(V, pomdp, 1001)
    assert a.alpha_star == pytest.approx(5 / 14, abs=1e-6)
    assert a.stopping_set == (a.alpha_star, 1.0)
    assert np.array_equal(a.stop_mask, a.grid >= a.alpha_star)


def test_appendix_actions(appendix):
    pomdp, V = appendix
    assert solver.optimal_action(V, pomdp, 1.0) == Action.STOP
    assert solver.optimal_action(V, pomdp, 0.0) == Action.CONTINUE
    assert solver.optimal_action(V, pomdp, 0.5) == Action.STOP


def test_episode_start_value(appendix):
    pomdp, V = appendix
    # E over the first observation from belief 0: (29/150)*5*V(5/29) + (1/30)*V(1)
    expected = 5 * (29 / 150) * V(5 / 29) + (1 / 30) * 100.0
    assert solver.episode_start_value(V, pomdp) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(-27.5, abs=1e-9)


def test_matches_grid_oracle_on_appendix(appendix):
    pomdp, V = appendix
    _, z0, z1 = pomdp.observations.likelihood_table()
    r = pomdp.rewards
    grid, ref = grid_values(0.2, z0, z1, r.stop_vector, r.continue_vector)
    assert np.abs(V(grid) - ref).max() < 0.5
    assert V(0.0) == pytest.approx(ref[0], abs=0.5)


@pytest.mark.parametrize("seed", [1, 2, 3, 4])
def test_matches_grid_oracle_on_random_models(seed):
    pomdp = _random_pomdp(seed)
    V = solver.value_iteration(pomdp)
    _, z0, z1 = pomdp.observations.likelihood_table()
    r = pomdp.rewards
    grid, ref = grid_values(pomdp.transition.p, z0, z1, r.stop_vector, r.continue_vector)
    assert np.abs(V(grid) - ref).max() < 0.5


@pytest.mark.parametrize("seed", [0, 5, 6])
def test_fixed_point_residual(seed):
    pomdp = IntrusionPOMDP(appendix_uniform()) if seed == 0 else _random_pomdp(seed)
    V = solver.value_iteration(pomdp)
    again = solver.bellman_backup(V.vectors, pomdp)
    grid = np.linspace(0, 1, 1001)
    assert np.abs(solver.value_at(V, grid) - solver.value_at(solver.ValueFunction(again), grid)).max() <= 1e-9


@pytest.mark.parametrize("seed", [0, 7, 8])
def test_convexity(seed):
    pomdp = IntrusionPOMDP(appendix_uniform()) if seed == 0 else _random_pomdp(seed)
    V = solver.value_iteration(pomdp)
    grid = np.linspace(0, 1, 1001)
    vals = V(grid)
    mids = V(0.5 * (grid[1:] + grid[:-1]))
    assert np.all(mids <= 0.5 * (vals[1:] + vals[:-1]) + 1e-9)


def test_threshold_curve_increasing(appendix):
    pomdp, V = appendix
    a = solver.stopping_set(V, pomdp, 1001)
    assert np.all(np.diff(a.curve) > 0)
    first = int(np.argmax(a.curve >= 0))
    assert a.grid[first] == pytest.approx(0.357, abs=0.005)


def test_threshold_formula_with_zero_value_function():
    pomdp = IntrusionPOMDP(appendix_uniform())
    V0 = solver.ValueFunction(np.zeros((1, 2)))
    assert solver.belief_threshold(V0, pomdp, 0.3) == pytest.approx(11 / 30)


@pytest.mark.parametrize("seed", [0, 11, 12, 4])
def test_threshold_formula_agrees_with_bellman(seed):
    pomdp = IntrusionPOMDP(appendix_uniform()) if seed == 0 else _random_pomdp(seed)
    V = solver.value_iteration(pomdp)
    for b in np.linspace(0, 1, 1001):
        assert solver.threshold_rule_action(V, pomdp, b) == solver.optimal_action(V, pomdp, b)


def test_stopping_dominates_when_early_stop_is_free():
    rewards = RewardParams(r_early_stop=100.0, r_stop_intrusion=100.0, r_service=0.0)
    pomdp = IntrusionPOMDP(appendix_uniform(), rewards=rewards)
    V = solver.value_iteration(pomdp)
    assert np.allclose(V(np.linspace(0, 1, 101)), 100.0)
    assert solver.stopping_set(V, pomdp).alpha_star == 0.0


def test_free_stop_with_service_reward_waits_one_step():
    # one more step of service is worth 10 - 100 * b1 before the sure 100
    pomdp = IntrusionPOMDP(appendix_uniform(), rewards=RewardParams(r_early_stop=100.0, r_stop_intrusion=100.0))
    V = solver.value_iteration(pomdp)
    assert V.vectors == pytest.approx(np.array([[110.0, 10.0], [100.0, 100.0]]))
    assert solver.stopping_set(V, pomdp).alpha_star == pytest.approx(0.1, abs=1e-6)


def test_stop_region_must_end_at_one():
    # stopping pays off only before the intrusion, so continuing wins at b=1
    rewards = RewardParams(r_stop_intrusion=-100.0, r_early_stop=100.0, r_intruded=0.0)
    pomdp = IntrusionPOMDP(appendix_uniform(), rewards=rewards)
    V = solver.value_iteration(pomdp, solver.SolverConfig(gamma=0.9))
    with pytest.raises(NonIntervalStoppingSet):
        solver.stopping_set(V, pomdp)


def test_not_converged():
    with pytest.raises(NotConverged) as info:
        solver.value_iteration(IntrusionPOMDP(appendix_uniform()), solver.SolverConfig(max_iterations=2))
    assert info.value.residual > 0


def test_observation_space_guard():
    pomdp = IntrusionPOMDP(overlapping_poissonlike())
    with pytest.raises(ObservationSpaceTooLarge):
        solver.value_iteration(pomdp)


@pytest.mark.parametrize("kw", [dict(gamma=0.0), dict(tolerance=0.0), dict(belief_grid_size=1),
                                dict(max_iterations=0)])
def test_bad_config(kw):
    with pytest.raises(BadParameters):
        solver.SolverConfig(**kw)


def test_grid_too_coarse(appendix):
    pomdp, V = appendix
    with pytest.raises(BadParameters):
        solver.stopping_set(V, pomdp, 50)


def test_discounted_solution_converges():
    pomdp = IntrusionPOMDP(appendix_uniform())
    V = solver.value_iteration(pomdp, solver.SolverConfig(gamma=0.9))
    assert V.converged and V.gamma == 0.9
    assert V(1.0) == 100.0


def test_threshold_analysis_roundtrip(appendix):
    pomdp, V = appendix
    a = solver.stopping_set(V, pomdp, 201)
    b = solver.ThresholdAnalysis.from_dict(a.to_dict())
    assert b.alpha_star == a.alpha_star
    assert np.array_equal(b.curve, a.curve) and np.array_equal(b.stop_mask, a.stop_mask)


lines = st.lists(st.tuples(st.integers(-50, 50), st.integers(-50, 50)), min_size=1, max_size=12)


@given(lines)
def test_pruning_preserves_values(vs):
    raw = np.array(vs, dtype=float)
    pruned = solver.upper_envelope(raw)
    grid = np.linspace(0, 1, 1001)
    assert pruned.shape[0] <= raw.shape[0]
    full = (raw[:, 0, None] * (1 - grid) + raw[:, 1, None] * grid).max(axis=0)
    assert np.array_equal(solver.value_at(solver.ValueFunction(pruned), grid), full)


@given(lines)
def test_envelope_slopes_increase(vs):
    pruned = solver.upper_envelope(np.array(vs, dtype=float))
    slopes = pruned[:, 1] - pruned[:, 0]
    assert np.all(np.diff(slopes) > 0)


@settings(deadline=None, max_examples=30)
@given(lines, lines)
def test_sup_distance_is_exact(a, b):
    A = solver.upper_envelope(np.array(a, dtype=float))
    B = solver.upper_envelope(np.array(b, dtype=float))
    grid = np.linspace(0, 1, 2001)
    dense = np.abs(solver.value_at(solver.ValueFunction(A), grid) - solver.value_at(solver.ValueFunction(B), grid))
    d = solver.sup_distance(A, B)
    assert d >= dense.max() - 1e-9


def test_phase_models_are_solved_on_the_averaged_likelihood():
    z = custom_table({"0": {"0": 3, "1": 1}, "1:1": {"1": 1}, "1:2": {"0": 1, "1": 1}})
    V = solver.value_iteration(IntrusionPOMDP(z))
    assert V.converged
