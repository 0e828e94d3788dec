import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ipstop import rng as rngmod
from ipstop import solver
from ipstop.dists import appendix_uniform, custom_table
from ipstop.errors import BadParameters, EmptyTraceSet
from ipstop.model import Action, IntrusionState, RewardParams, TransitionModel, reward
from ipstop.policies import AlwaysContinue, BeliefThreshold, FirstAlert, FixedTime, Oracle, Policy
from ipstop.sim import (EndReason, EnvConfig, Episode, EpisodeTrace, StepRecord, compute_metrics, dumps_batch,
                        episodes_csv, run_batch, run_episode, steps_csv)

from oracles import first_alert_early_stop, fixed_time_value

S0, S1, T = IntrusionState.NO_INTRUSION, IntrusionState.INTRUSION, IntrusionState.TERMINAL
ENV = EnvConfig(appendix_uniform())


class CoinFlip(Policy):
    """Stops with a fixed probability; exercises the stochastic branch of act."""

    def __init__(self, q):
        self.q = q

    def stop_probability(self, inp):
        return self.q


def alert_model(q, attack_weights=(0.0, 1.0)):
    """dx is 1 (an alert) with probability q before onset."""
    return custom_table({"0": {"0": 1 - q, "1": q}, "1": {str(i): w for i, w in enumerate(attack_weights)}},
                        bounds=(1, 0, 0))


def _within_se(values, target, k=4.0):
    values = np.asarray(values, dtype=float)
    return abs(values.mean() - target) <= k * values.std() / math.sqrt(values.size) + 1e-12


# ---------------------------------------------------------------- single episodes


def test_oracle_stops_at_onset():
    for i in range(50):
        tr = run_episode(Oracle(), ENV, rngmod.stream(3, i))
        assert tr.end_reason == EndReason.DEFENDER_STOPPED
        assert tr.stop_time == tr.intrusion_start
        assert tr.total_reward == 10 * (tr.intrusion_start - 1) + 100


def test_never_stop_runs_until_the_attack_completes():
    env = EnvConfig(appendix_uniform(), attacker_sequence_length=5)
    for i in range(50):
        tr = run_episode(AlwaysContinue(), env, rngmod.stream(4, i))
        assert tr.end_reason == EndReason.INTRUSION_COMPLETED
        assert tr.steps[-1].t == tr.intrusion_start + 5
        assert tr.length == tr.intrusion_start + 4


def test_max_steps_truncates():
    env = EnvConfig(appendix_uniform(), TransitionModel(0.0), max_steps=7)
    tr = run_episode(AlwaysContinue(), env, rngmod.stream(0))
    assert tr.end_reason == EndReason.MAX_STEPS
    assert tr.length == 7 and tr.intrusion_start is None
    assert tr.total_reward == 70


def test_immediate_stop():
    traces, m = run_batch(FixedTime(1), ENV, 4000, seed=2)
    rewards = {tr.total_reward for tr in traces}
    assert rewards == {-100.0, 100.0}
    assert m.detection_probability == pytest.approx(0.2, abs=0.025)


def test_trace_structure():
    for i in range(30):
        tr = run_episode(CoinFlip(0.1), ENV, rngmod.stream(5, i))
        terminal = [r for r in tr.steps if r.state == T]
        assert len(terminal) == 1 and tr.steps[-1] is terminal[0]
        assert terminal[0].observation is None and terminal[0].action is None
        assert tr.total_reward == sum(r.reward for r in tr.steps)
        assert tr.length >= 1


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 0.5))
def test_step_rewards_come_from_the_reward_table(seed, q):
    rewards = RewardParams(r_service=7.0, r_intruded=-33.0)
    env = EnvConfig(appendix_uniform(), rewards=rewards, attacker_sequence_length=4)
    tr = run_episode(CoinFlip(q), env, rngmod.stream(seed))
    for rec in tr.steps[:-1]:
        assert rec.reward == reward(rec.state, rec.action, rewards)
    assert tr.total_reward == sum(r.reward for r in tr.steps)


def test_counters_accumulate():
    ep = Episode(ENV, rngmod.stream(9))
    seen = 0
    while not ep.done:
        seen += ep.observation[0]
        assert ep.inputs().summary.x == seen and ep.inputs().summary.t == ep.t
        ep.step(Action.CONTINUE)
    with pytest.raises(RuntimeError):
        ep.step(Action.STOP)


def test_bad_env():
    with pytest.raises(BadParameters):
        EnvConfig(appendix_uniform(), attacker_sequence_length=0)
    with pytest.raises(BadParameters):
        EnvConfig(appendix_uniform(), max_steps=0)
    with pytest.raises(BadParameters):
        run_batch(Oracle(), ENV, 0, seed=0)


# ---------------------------------------------------------------- batches and baselines


@pytest.mark.slow
def test_onset_is_geometric():
    env = EnvConfig(appendix_uniform(), attacker_sequence_length=1)
    traces, _ = run_batch(AlwaysContinue(), env, 100_000, seed=11)
    onsets = np.array([tr.intrusion_start for tr in traces])
    k = np.arange(1, 21)
    empirical = np.array([(onsets == i).mean() for i in k])
    exact = 0.8 ** (k - 1) * 0.2
    assert 0.5 * np.abs(empirical - exact).sum() <= 0.01


@pytest.mark.parametrize("k", [1, 2, 3, 6])
def test_fixed_time_reward_matches_analytic(k):
    traces, m = run_batch(FixedTime(k), ENV, 20_000, seed=k)
    assert _within_se([tr.total_reward for tr in traces], fixed_time_value(k, 0.2, 22))


def test_fixed_time_analytic_values():
    # worked by hand: k=1 is 0.2*100 + 0.8*(-100)
    assert fixed_time_value(1, 0.2, 22) == pytest.approx(-60.0)
    assert fixed_time_value(2, 0.2, 22) == pytest.approx(-38.0)
    # k=6: sum over onsets j<=6 of 0.8^(j-1)*0.2*(150 - 100(6-j)), plus 0.8^6*(50 - 100)
    assert fixed_time_value(6, 0.2, 22) == pytest.approx(-133.5008)


def test_fixed6_early_stop_is_the_geometric_tail():
    _, m = run_batch(FixedTime(6), ENV, 10_000, seed=1)
    assert m.early_stopping_probability == pytest.approx(0.8 ** 6, abs=0.02)
    assert 0.8 ** 6 == pytest.approx(0.262, abs=1e-3)


@pytest.mark.parametrize("q", [0.1, 0.27, 0.6])
def test_first_alert_early_stop_matches_analytic(q):
    env = EnvConfig(alert_model(q, attack_weights=(0.3, 0.7)))
    _, m = run_batch(FirstAlert(), env, 10_000, seed=7)
    assert m.early_stopping_probability == pytest.approx(first_alert_early_stop(0.2, q), abs=0.02)


@given(st.floats(0.2601, 1.0))
def test_first_alert_stops_early_more_often_than_fixed6(q):
    assert first_alert_early_stop(0.2, q) > 0.8 ** 6


def test_first_alert_ordering_in_simulation():
    env = EnvConfig(alert_model(0.27))
    _, fa = run_batch(FirstAlert(), env, 10_000, seed=3)
    _, f6 = run_batch(FixedTime(6), env, 10_000, seed=3)
    assert fa.early_stopping_probability > f6.early_stopping_probability + 0.1


def test_same_seed_same_metrics():
    a = run_batch(CoinFlip(0.2), ENV, 300, seed=5)
    b = run_batch(CoinFlip(0.2), ENV, 300, seed=5)
    assert a[1] == b[1]
    assert episodes_csv(a[0]) == episodes_csv(b[0])


def test_workers_do_not_change_results():
    serial, m1 = run_batch(CoinFlip(0.2), ENV, 400, seed=8)
    threaded, m4 = run_batch(CoinFlip(0.2), ENV, 400, seed=8, workers=4)
    assert m1 == m4
    assert serial == threaded


def test_single_episode_batch():
    traces, m = run_batch(Oracle(), ENV, 1, seed=0)
    tr = traces[0]
    assert m.mean_episodic_reward == tr.total_reward
    assert m.mean_episode_length == tr.length
    assert m.detection_probability == 1.0
    assert m.mean_intrusion_to_stop_delay == 0.0


# ---------------------------------------------------------------- metrics on hand-made traces


def make_trace(onset, stop, horizon=None):
    """Continue until ``stop`` (or ``horizon``) with the intrusion active from ``onset``."""
    last = stop if stop is not None else horizon
    steps = []
    for t in range(1, last + 1):
        state = S1 if onset is not None and t >= onset else S0
        action = Action.STOP if t == stop else Action.CONTINUE
        steps.append(StepRecord(t, state, (0, 0, 0), action, reward(state, action, RewardParams())))
    steps.append(StepRecord(last + 1, T, None, None, 0.0))
    end = EndReason.DEFENDER_STOPPED if stop is not None else EndReason.MAX_STEPS
    return EpisodeTrace(onset, tuple(steps), end, float(sum(s.reward for s in steps)))


def test_metrics_by_hand():
    traces = [make_trace(2, 4), make_trace(3, 3), make_trace(5, 2), make_trace(None, 1), make_trace(None, None, 4)]
    m = compute_metrics(traces)
    assert m.detection_probability == pytest.approx(2 / 5)
    assert m.early_stopping_probability == pytest.approx(2 / 5)
    assert m.not_stopped_probability == pytest.approx(1 / 5)
    assert m.mean_intrusion_to_stop_delay == pytest.approx(1.0)
    assert m.mean_episode_length == pytest.approx((4 + 3 + 2 + 1 + 4) / 5)
    # rewards: 10-90-90+100, 10+10+100, 10-100, -100, 40
    assert m.mean_episodic_reward == pytest.approx((-70 + 120 - 90 - 100 + 40) / 5)


def test_detection_counts_onset_at_one():
    traces = [make_trace(1, 1)] * 3 + [make_trace(None, 1)] * 5
    m = compute_metrics(traces)
    assert m.detection_probability == pytest.approx(3 / 8)
    assert m.mean_intrusion_to_stop_delay == 0.0


def test_metrics_fractions_sum_to_one():
    traces, m = run_batch(CoinFlip(0.15), ENV, 500, seed=12)
    assert m.detection_probability + m.early_stopping_probability + m.not_stopped_probability == pytest.approx(1.0, abs=1e-9)


def test_metrics_errors_and_nan_delay():
    with pytest.raises(EmptyTraceSet):
        compute_metrics([])
    m = compute_metrics([make_trace(None, 2)])
    assert math.isnan(m.mean_intrusion_to_stop_delay)
    assert m.to_dict()["mean_intrusion_to_stop_delay"] is None


# ---------------------------------------------------------------- export and solver agreement


def test_exports():
    traces, m = run_batch(FixedTime(2), ENV, 3, seed=0)
    rows = episodes_csv(traces).splitlines()
    assert rows[0] == "episode,intrusion_start,stop_time,end_reason,length,total_reward"
    assert len(rows) == 4 and rows[1].split(",")[3] == "DefenderStopped"
    assert len(steps_csv(traces).splitlines()) == 1 + 3 * 2
    doc = json.loads(dumps_batch(traces, m, ENV, FixedTime(2), {"seed": 0}))
    assert doc["config"] == {"seed": 0}
    assert doc["policy"] == "fixed:2" and len(doc["episodes"]) == 3


def test_threshold_policy_follows_the_solver():
    pomdp = ENV.pomdp
    V = solver.value_iteration(pomdp)
    alpha = solver.stopping_set(V, pomdp).alpha_star
    policy = BeliefThreshold(alpha)
    checked = 0
    for i in range(1000):
        ep = Episode(ENV, rngmod.stream(21, i))
        while not ep.done:
            a = policy.act(ep.inputs())
            assert a == solver.optimal_action(V, pomdp, ep.belief)
            ep.step(a)
            checked += 1
    assert checked > 1000
