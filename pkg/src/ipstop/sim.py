"""Episode simulation and evaluation metrics.

Timing within step ``t``: the intrusion onset (probability ``p`` while none
has started) is resolved first, so an intrusion can begin at ``t = 1`` and
stopping at the onset step counts as detection with zero delay. The
observation of step ``t`` is then drawn and the defender acts on everything
observed up to and including it.

After onset the attacker phase advances once per step; the episode ends when
the phase would exceed ``attacker_sequence_length``.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import rng as rngmod
from .errors import BadParameters, EmptyTraceSet
from .model import (Action, IntrusionPOMDP, IntrusionState, ObservationModel, RewardParams, TransitionModel,
                    belief_update, reward)
from .policies import HistorySummary, Policy, PolicyInput


@dataclass(frozen=True)
class EnvConfig:
    observations: ObservationModel
    transition: TransitionModel = TransitionModel()
    rewards: RewardParams = RewardParams()
    attacker_sequence_length: int = 22
    max_steps: int = 200

    def __post_init__(self):
        if self.attacker_sequence_length < 1:
            raise BadParameters("attacker_sequence_length must be at least 1")
        if self.max_steps < 1:
            raise BadParameters("max_steps must be at least 1")

    @property
    def pomdp(self) -> IntrusionPOMDP:
        return IntrusionPOMDP(self.observations, self.transition, self.rewards)

    def to_dict(self) -> dict:
        return {
            "p": self.transition.p,
            "rewards": self.rewards.to_dict(),
            "attacker_sequence_length": self.attacker_sequence_length,
            "max_steps": self.max_steps,
            "observation_model": {
                "name": self.observations.name,
                "bounds": list(self.observations.bounds),
                "keys": [list(k) for k in self.observations.components],
                "sha256_16": self.observations.digest(),
            },
        }


class EndReason(str, enum.Enum):
    DEFENDER_STOPPED = "DefenderStopped"
    INTRUSION_COMPLETED = "IntrusionCompleted"
    MAX_STEPS = "MaxSteps"


@dataclass(frozen=True)
class StepRecord:
    t: int
    state: IntrusionState
    observation: Optional[Tuple[int, int, int]]
    action: Optional[Action]
    reward: float


@dataclass(frozen=True)
class EpisodeTrace:
    intrusion_start: Optional[int]
    steps: Tuple[StepRecord, ...]
    end_reason: EndReason
    total_reward: float

    @property
    def length(self) -> int:
        """Number of steps at which the defender acted."""
        return len(self.steps) - 1

    @property
    def stop_time(self) -> Optional[int]:
        if self.end_reason != EndReason.DEFENDER_STOPPED:
            return None
        return self.steps[-2].t

    @property
    def detected(self) -> bool:
        st = self.stop_time
        return st is not None and self.intrusion_start is not None and st >= self.intrusion_start

    @property
    def stopped_early(self) -> bool:
        st = self.stop_time
        return st is not None and (self.intrusion_start is None or st < self.intrusion_start)


class Episode:
    """Step-by-step episode driver.

    ``inputs()`` gives what a policy may look at before acting; ``step(a)``
    applies the action and advances. ``track_belief`` runs the Bayes filter
    on the phase-averaged observation model.
    """

    def __init__(self, env: EnvConfig, rng: np.random.Generator, track_belief: bool = True):
        self.env = env
        self.rng = rng
        self.track_belief = track_belief
        self.state = IntrusionState.NO_INTRUSION
        self.phase = 0
        self.onset: Optional[int] = None
        self.t = 0
        self.x = self.y = self.z = 0
        self.belief = 0.0
        self.observation = None
        self.records: List[StepRecord] = []
        self.end_reason: Optional[EndReason] = None
        self._advance()

    @property
    def done(self) -> bool:
        return self.end_reason is not None

    def _terminate(self, t: int, reason: EndReason) -> None:
        self.records.append(StepRecord(t, IntrusionState.TERMINAL, None, None, 0.0))
        self.state = IntrusionState.TERMINAL
        self.end_reason = reason

    def _advance(self) -> None:
        self.t += 1
        if self.state == IntrusionState.NO_INTRUSION:
            if self.rng.random() < self.env.transition.p:
                self.state = IntrusionState.INTRUSION
                self.onset = self.t
                self.phase = 1
        else:
            self.phase += 1
            if self.phase > self.env.attacker_sequence_length:
                self._terminate(self.t, EndReason.INTRUSION_COMPLETED)
                return
        o = self.env.observations.sample(self.state, self.phase, self.rng)
        self.observation = o
        self.x += o[0]
        self.y += o[1]
        self.z += o[2]
        if self.track_belief:
            self.belief = belief_update(self.belief, Action.CONTINUE, o, self.env.transition, self.env.observations)

    def summary(self) -> HistorySummary:
        return HistorySummary(self.x, self.y, self.z, self.t)

    def inputs(self) -> PolicyInput:
        return PolicyInput(
            summary=self.summary(),
            belief=self.belief if self.track_belief else None,
            intrusion_active=self.state == IntrusionState.INTRUSION,
        )

    def step(self, action: Action) -> float:
        if self.done:
            raise RuntimeError("episode already finished")
        action = Action(action)
        r = reward(self.state, action, self.env.rewards)
        self.records.append(StepRecord(self.t, self.state, self.observation, action, r))
        if action == Action.STOP:
            self._terminate(self.t + 1, EndReason.DEFENDER_STOPPED)
        elif self.t >= self.env.max_steps:
            self._terminate(self.t + 1, EndReason.MAX_STEPS)
        else:
            self._advance()
        return r

    def trace(self) -> EpisodeTrace:
        if not self.done:
            raise RuntimeError("episode still running")
        return EpisodeTrace(self.onset, tuple(self.records), self.end_reason,
                            float(sum(r.reward for r in self.records)))


def run_episode(policy: Policy, env: EnvConfig, rng: np.random.Generator, deterministic: bool = False) -> EpisodeTrace:
    ep = Episode(env, rng, track_belief="belief" in policy.requires)
    while not ep.done:
        ep.step(policy.act(ep.inputs(), ep.rng, deterministic))
    return ep.trace()


@dataclass(frozen=True)
class Metrics:
    episodes: int
    mean_episodic_reward: float
    mean_episode_length: float
    detection_probability: float
    early_stopping_probability: float
    not_stopped_probability: float
    mean_intrusion_to_stop_delay: float  # nan when nothing was detected

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


METRIC_NAMES = ("mean_episodic_reward", "mean_episode_length", "detection_probability",
                "early_stopping_probability", "mean_intrusion_to_stop_delay")


def compute_metrics(traces: Sequence[EpisodeTrace]) -> Metrics:
    n = len(traces)
    if n == 0:
        raise EmptyTraceSet("no episodes to summarize")
    detected = [t for t in traces if t.detected]
    early = sum(t.stopped_early for t in traces)
    delays = [t.stop_time - t.intrusion_start for t in detected]
    return Metrics(
        episodes=n,
        mean_episodic_reward=float(np.mean([t.total_reward for t in traces])),
        mean_episode_length=float(np.mean([t.length for t in traces])),
        detection_probability=len(detected) / n,
        early_stopping_probability=early / n,
        not_stopped_probability=(n - len(detected) - early) / n,
        mean_intrusion_to_stop_delay=float(np.mean(delays)) if delays else float("nan"),
    )


def run_batch(policy: Policy, env: EnvConfig, n: int, seed: int, workers: int = 1,
              deterministic: bool = False, stream: Sequence = ("episode",)):
    """``n`` episodes, episode ``i`` drawing from its own stream ``(seed, *stream, i)``."""
    if n < 1:
        raise BadParameters("need at least one episode")

    def one(i):
        return run_episode(policy, env, rngmod.stream(seed, *stream, i), deterministic)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            traces = list(pool.map(one, range(n)))
    else:
        traces = [one(i) for i in range(n)]
    return traces, compute_metrics(traces)


# --------------------------------------------------------------------------
# export

EPISODE_COLUMNS = ("episode", "intrusion_start", "stop_time", "end_reason", "length", "total_reward")


def episode_rows(traces: Sequence[EpisodeTrace]):
    for i, tr in enumerate(traces):
        yield (i, tr.intrusion_start if tr.intrusion_start is not None else "",
               tr.stop_time if tr.stop_time is not None else "", tr.end_reason.value, tr.length,
               tr.total_reward)


def episodes_csv(traces: Sequence[EpisodeTrace]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPISODE_COLUMNS)
    for row in episode_rows(traces):
        w.writerow(row[:-1] + (format(row[-1], ".17g"),))
    return buf.getvalue()


STEP_COLUMNS = ("episode", "t", "state", "dx", "dy", "dz", "action", "reward")


def steps_csv(traces: Sequence[EpisodeTrace]) -> str:
    """One row per decision; the terminal record is left out."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STEP_COLUMNS)
    for i, tr in enumerate(traces):
        for rec in tr.steps[:-1]:
            o = rec.observation if rec.observation is not None else ("", "", "")
            w.writerow((i, rec.t, int(rec.state), *o, int(rec.action), format(rec.reward, ".17g")))
    return buf.getvalue()


def batch_document(traces, metrics: Metrics, env: EnvConfig, policy: Policy, config: dict = None) -> dict:
    return {
        "config": config if config is not None else {},
        "env": env.to_dict(),
        "policy": policy.describe(),
        "metrics": metrics.to_dict(),
        "episodes": [dict(zip(EPISODE_COLUMNS, (None if v == "" else v for v in row))) for row in episode_rows(traces)],
    }


def dumps_batch(traces, metrics, env, policy, config=None) -> str:
    return json.dumps(batch_document(traces, metrics, env, policy, config), indent=1, sort_keys=True) + "\n"
