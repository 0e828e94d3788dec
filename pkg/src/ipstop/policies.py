"""Defender policies behind one interface.

Every policy maps a :class:`PolicyInput` to a stop probability. Policies
declare the inputs they need in ``requires``; :meth:`Policy.act` raises
:class:`MissingInput` when the caller leaves one out.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from . import nn
from .errors import BadParameters, MissingInput
from .model import Action


@dataclass(frozen=True)
class HistorySummary:
    """Cumulative counters up to and including step ``t``."""

    x: int = 0
    y: int = 0
    z: int = 0
    t: int = 1


@dataclass(frozen=True)
class PolicyInput:
    summary: Optional[HistorySummary] = None
    belief: Optional[float] = None
    intrusion_active: Optional[bool] = None


class Policy:
    kind = "policy"
    requires: frozenset = frozenset()

    def stop_probability(self, inp: PolicyInput) -> float:
        raise NotImplementedError

    def check(self, inp: PolicyInput) -> None:
        for name in self.requires:
            if getattr(inp, name) is None:
                raise MissingInput(f"{self.kind} policy needs '{name}'")

    def act(self, inp: PolicyInput, rng: np.random.Generator = None, deterministic: bool = False) -> Action:
        self.check(inp)
        p = self.stop_probability(inp)
        if deterministic:
            return Action.STOP if p >= 0.5 else Action.CONTINUE
        if p >= 1.0:
            return Action.STOP
        if p <= 0.0:
            return Action.CONTINUE
        return Action.STOP if rng.random() < p else Action.CONTINUE

    def to_dict(self) -> dict:
        return {"kind": self.kind}

    def describe(self) -> str:
        return self.kind


class BeliefThreshold(Policy):
    """Stop once the intrusion belief reaches ``alpha``."""

    kind = "belief_threshold"
    requires = frozenset({"belief"})

    def __init__(self, alpha: float):
        if not 0 <= alpha <= 1:
            raise BadParameters("alpha must lie in [0, 1]")
        self.alpha = float(alpha)

    def stop_probability(self, inp):
        return 1.0 if inp.belief >= self.alpha else 0.0

    def to_dict(self):
        return {"kind": self.kind, "alpha": self.alpha}

    def describe(self):
        return f"threshold:{self.alpha:g}"


class FixedTime(Policy):
    """Stop at step ``k`` regardless of observations."""

    kind = "fixed_time"
    requires = frozenset({"summary"})

    def __init__(self, k: int = 6):
        if k < 1:
            raise BadParameters("k must be at least 1")
        self.k = int(k)

    def stop_probability(self, inp):
        return 1.0 if inp.summary.t == self.k else 0.0

    def to_dict(self):
        return {"kind": self.kind, "k": self.k}

    def describe(self):
        return f"fixed:{self.k}"


class FirstAlert(Policy):
    """Stop after the first IDS alert of either severity."""

    kind = "first_alert"
    requires = frozenset({"summary"})

    def stop_probability(self, inp):
        return 1.0 if inp.summary.x + inp.summary.y >= 1 else 0.0

    def describe(self):
        return "first-alert"


class Oracle(Policy):
    """Evaluation-only upper bound: stops as soon as an intrusion is active."""

    kind = "oracle"
    requires = frozenset({"intrusion_active"})

    def stop_probability(self, inp):
        return 1.0 if inp.intrusion_active else 0.0


class AlwaysContinue(Policy):
    kind = "always_continue"

    def stop_probability(self, inp):
        return 0.0

    def describe(self):
        return "always-continue"


FEATURE_MODES = ("summary", "belief")


class NeuralPolicy(Policy):
    """Actor head of an actor-critic network.

    ``features="summary"`` feeds ``(x/X_max, y/Y_max, z/Z_max, t/max_steps)``;
    ``features="belief"`` feeds the filter's belief alone.
    """

    kind = "neural"

    def __init__(self, params: nn.PolicyParams, features: str = "summary", bounds=(1000, 1000, 1000),
                 max_steps: int = 200, deterministic: bool = False):
        if features not in FEATURE_MODES:
            raise BadParameters(f"features must be one of {FEATURE_MODES}")
        self.params = params
        self.features = features
        self.bounds = tuple(int(b) for b in bounds)
        self.max_steps = int(max_steps)
        self.deterministic = deterministic
        self.requires = frozenset({features})
        self._scale = np.array([max(b, 1) for b in self.bounds] + [self.max_steps], dtype=float)

    @property
    def input_dim(self) -> int:
        return 4 if self.features == "summary" else 1

    def featurize(self, inp: PolicyInput) -> np.ndarray:
        if self.features == "belief":
            return np.array([inp.belief], dtype=float)
        s = inp.summary
        return np.array([s.x, s.y, s.z, min(s.t, self.max_steps)], dtype=float) / self._scale

    def featurize_many(self, rows: np.ndarray) -> np.ndarray:
        """Vectorized featurization of raw ``(x, y, z, t)`` rows or a belief column."""
        rows = np.asarray(rows, dtype=float)
        if self.features == "belief":
            return rows.reshape(-1, 1)
        rows = rows.reshape(-1, 4).copy()
        rows[:, 3] = np.minimum(rows[:, 3], self.max_steps)
        return rows / self._scale

    def stop_probabilities(self, X: np.ndarray) -> np.ndarray:
        probs, _ = nn.action_probs(self.params, X)
        return probs[:, Action.STOP]

    def stop_probability(self, inp):
        return float(self.stop_probabilities(self.featurize(inp)[None, :])[0])

    def act(self, inp, rng=None, deterministic=False):
        return super().act(inp, rng, deterministic or self.deterministic)

    def to_dict(self):
        return {
            "kind": self.kind,
            "features": self.features,
            "bounds": list(self.bounds),
            "max_steps": self.max_steps,
            "deterministic": self.deterministic,
            "params": self.params.to_dict(),
        }

    def describe(self):
        return f"neural[{self.features}]"


def policy_from_dict(d: Mapping) -> Policy:
    kind = d["kind"]
    if kind == "belief_threshold":
        return BeliefThreshold(d["alpha"])
    if kind == "fixed_time":
        return FixedTime(d["k"])
    if kind == "first_alert":
        return FirstAlert()
    if kind == "oracle":
        return Oracle()
    if kind == "always_continue":
        return AlwaysContinue()
    if kind == "neural":
        return NeuralPolicy(nn.PolicyParams.from_dict(d["params"]), d["features"], d["bounds"],
                            d["max_steps"], d.get("deterministic", False))
    raise BadParameters(f"unknown policy kind {kind!r}")


def dumps_policy(policy: Policy) -> str:
    return json.dumps(policy.to_dict(), indent=1, sort_keys=True) + "\n"


def load_policy(path) -> Policy:
    with open(path, encoding="utf-8") as fh:
        return policy_from_dict(json.load(fh))


def parse_policy(spec: str) -> Policy:
    """Parse ``fixed:6``, ``first-alert``, ``oracle``, ``threshold:0.357``,
    ``always-continue`` or a path to a policy JSON file."""
    name, _, arg = spec.partition(":")
    if name == "fixed":
        return FixedTime(int(arg or 6))
    if name == "first-alert":
        return FirstAlert()
    if name == "oracle":
        return Oracle()
    if name == "always-continue":
        return AlwaysContinue()
    if name == "threshold" and arg:
        return BeliefThreshold(float(arg))
    if spec.endswith(".json"):
        return load_policy(spec)
    raise BadParameters(f"cannot parse policy spec {spec!r}")


def probe_grid(policy: Policy, grid: Mapping[str, Sequence[float]]) -> Dict[str, np.ndarray]:
    """Stop probability at every point of a grid over ``x, y, z, t`` and/or ``b``.

    Returns one column per axis plus ``stop_probability``, in row-major order
    of the axes as given. Stochastic neural policies also get ``stop_log_odds``,
    which keeps its ordering where the probability rounds to 0 or 1.
    """
    axes = list(grid)
    unknown = set(axes) - {"x", "y", "z", "t", "b"}
    if unknown:
        raise BadParameters(f"unknown probe axes {sorted(unknown)}")
    points = np.array(list(itertools.product(*(grid[a] for a in axes))), dtype=float)
    cols = {a: points[:, i] for i, a in enumerate(axes)}
    n = points.shape[0]
    if isinstance(policy, NeuralPolicy):
        if policy.features == "belief":
            if "b" not in cols:
                raise MissingInput("neural belief policy needs a 'b' axis")
            X = policy.featurize_many(cols["b"])
        else:
            raw = np.stack([cols.get(k, np.zeros(n)) for k in "xyz"] + [cols.get("t", np.ones(n))], axis=1)
            X = policy.featurize_many(raw)
        logits, _ = nn.forward(policy.params, X)
        probs = np.exp(nn.log_softmax(logits))[:, Action.STOP]
        if policy.deterministic:
            probs = (probs >= 0.5).astype(float)
        else:
            cols["stop_log_odds"] = logits[:, Action.STOP] - logits[:, Action.CONTINUE]
    else:
        probs = np.empty(n)
        for i in range(n):
            summary = HistorySummary(*(int(cols[k][i]) if k in cols else d for k, d in zip("xyzt", (0, 0, 0, 1))))
            inp = PolicyInput(summary=summary, belief=float(cols["b"][i]) if "b" in cols else None)
            policy.check(inp)
            probs[i] = policy.stop_probability(inp)
    cols["stop_probability"] = probs
    if "stop_log_odds" in cols:
        cols["stop_log_odds"] = cols.pop("stop_log_odds")
    return cols
