"""The intrusion-prevention stopping POMDP.

Two non-terminal states (no intrusion / intrusion ongoing) plus an absorbing
terminal state, two actions (stop / continue), a Bernoulli intrusion onset,
and observations that are triples of per-step counters ``(dx, dy, dz)``:
severe IDS alerts, warning IDS alerts and login attempts.

Observation distributions are kept as explicit finite pmfs keyed by
``(state, phase)`` where ``phase`` counts steps since the intrusion began
(0 for the no-intrusion state). A phase-0 entry for the intrusion state means
the distribution does not depend on the phase.
"""
from __future__ import annotations

import bisect
import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import BadParameters, ObservationSpaceTooLarge, UnknownPhase, ZeroProbabilityObservation

NORMALIZER_FLOOR = 1e-12
PMF_TOL = 1e-9
COUNTERS = ("dx", "dy", "dz")


class IntrusionState(enum.IntEnum):
    NO_INTRUSION = 0
    INTRUSION = 1
    TERMINAL = 2


class Action(enum.IntEnum):
    STOP = 0
    CONTINUE = 1


#: The observation emitted in the terminal state.
TERMINAL_OBS = None

Triple = Tuple[int, int, int]
Observation = Optional[Triple]


def as_triple(o) -> Observation:
    """Normalize an observation; a bare integer is read as ``(dx, 0, 0)``."""
    if o is None:
        return None
    if isinstance(o, (int, np.integer)):
        return (int(o), 0, 0)
    dx, dy, dz = o
    return (int(dx), int(dy), int(dz))


@dataclass(frozen=True)
class RewardParams:
    r_stop_intrusion: float = 100.0
    r_early_stop: float = -100.0
    r_service: float = 10.0
    r_intruded: float = -100.0

    def __post_init__(self):
        for name in ("r_stop_intrusion", "r_early_stop", "r_service", "r_intruded"):
            if not np.isfinite(getattr(self, name)):
                raise BadParameters(f"{name} must be finite")

    @property
    def stop_vector(self) -> np.ndarray:
        """Stop reward as a linear function of the belief: ``(value at b=0, value at b=1)``."""
        return np.array([self.r_early_stop, self.r_stop_intrusion], dtype=float)

    @property
    def continue_vector(self) -> np.ndarray:
        return np.array([self.r_service, self.r_service + self.r_intruded], dtype=float)

    def to_dict(self) -> dict:
        return {
            "r_stop_intrusion": self.r_stop_intrusion,
            "r_early_stop": self.r_early_stop,
            "r_service": self.r_service,
            "r_intruded": self.r_intruded,
        }


@dataclass(frozen=True)
class TransitionModel:
    """Per-step probability ``p`` that an intrusion starts."""

    p: float = 0.2

    def __post_init__(self):
        if not 0 <= self.p <= 1:
            raise BadParameters(f"onset probability must lie in [0, 1], got {self.p}")


def transition_prob(s, a, s2, m: TransitionModel):
    s, a, s2 = IntrusionState(s), Action(a), IntrusionState(s2)
    if s == IntrusionState.TERMINAL or a == Action.STOP:
        return 1 if s2 == IntrusionState.TERMINAL else 0
    if s == IntrusionState.NO_INTRUSION:
        if s2 == IntrusionState.NO_INTRUSION:
            return 1 - m.p
        if s2 == IntrusionState.INTRUSION:
            return m.p
        return 0
    return 1 if s2 == IntrusionState.INTRUSION else 0


def reward(s, a, r: RewardParams) -> float:
    s, a = IntrusionState(s), Action(a)
    if s == IntrusionState.TERMINAL:
        return 0.0
    intruded = s == IntrusionState.INTRUSION
    if a == Action.STOP:
        return r.r_stop_intrusion if intruded else r.r_early_stop
    return r.r_service + (r.r_intruded if intruded else 0.0)


def belief_reward(b1, a, r: RewardParams):
    """Expected one-step reward at belief ``b1``; works elementwise on arrays."""
    v0, v1 = r.stop_vector if Action(a) == Action.STOP else r.continue_vector
    return v0 * (1 - b1) + v1 * b1


# --------------------------------------------------------------------------
# finite pmfs


def _frozen(a, dtype) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


class Pmf:
    """A pmf over non-negative integers stored as sorted ``support``/``probs`` arrays."""

    __slots__ = ("support", "probs", "cdf", "_cdf_list", "_support_list", "_map")

    def __init__(self, support: Sequence[int], probs: Sequence[float]):
        support = np.asarray(support, dtype=np.int64)
        probs = np.asarray(probs, dtype=float)
        if support.shape != probs.shape or support.ndim != 1 or support.size == 0:
            raise BadParameters("support and probs must be equal-length non-empty vectors")
        if np.any(probs < 0) or not np.all(np.isfinite(probs)):
            raise BadParameters("probabilities must be finite and non-negative")
        if abs(probs.sum() - 1.0) > PMF_TOL:
            raise BadParameters(f"pmf sums to {probs.sum()!r}, not 1")
        order = np.argsort(support, kind="stable")
        support, probs = support[order], probs[order]
        if np.any(np.diff(support) == 0):
            raise BadParameters("duplicate support points")
        if support[0] < 0:
            raise BadParameters("counter values must be non-negative")
        self.support = _frozen(support, np.int64)
        self.probs = _frozen(probs, float)
        cdf = np.cumsum(probs)
        cdf[-1] = 1.0
        self.cdf = _frozen(cdf, float)
        # plain lists: bisect on scalars is much faster than np.searchsorted
        self._cdf_list = cdf.tolist()
        self._support_list = support.tolist()
        self._map = dict(zip(self._support_list, probs.tolist()))

    @classmethod
    def from_weights(cls, weights: Mapping[int, float]) -> "Pmf":
        merged: Dict[int, float] = {}
        for k, v in weights.items():
            merged[int(k)] = merged.get(int(k), 0.0) + float(v)
        keys = sorted(merged)
        w = np.array([merged[k] for k in keys])
        if w.sum() <= 0:
            raise BadParameters("weights must have positive mass")
        return cls(keys, w / w.sum())

    @classmethod
    def point(cls, k: int = 0) -> "Pmf":
        return cls([k], [1.0])

    @classmethod
    def uniform(cls, lo: int, hi: int) -> "Pmf":
        """Uniform on the integers ``lo..hi`` inclusive."""
        n = hi - lo + 1
        return cls(np.arange(lo, hi + 1), np.full(n, 1.0 / n))

    def prob(self, k: int) -> float:
        return self._map.get(k, 0.0)

    def draw(self, u: float) -> int:
        """Inverse-CDF draw for a uniform ``u`` in [0, 1)."""
        sup = self._support_list
        if len(sup) == 1:
            return sup[0]
        i = bisect.bisect_right(self._cdf_list, u)
        return sup[i] if i < len(sup) else sup[-1]

    @property
    def max_value(self) -> int:
        return int(self.support[-1])

    def to_dict(self) -> dict:
        return {"support": self.support.tolist(), "probs": [format(p, ".17g") for p in self.probs]}

    @classmethod
    def from_dict(cls, d) -> "Pmf":
        return cls(d["support"], [float(p) for p in d["probs"]])

    def __eq__(self, other):
        return (isinstance(other, Pmf) and np.array_equal(self.support, other.support)
                and np.array_equal(self.probs, other.probs))


class FactorizedPmf:
    """Product of independent per-counter pmfs."""

    kind = "factorized"

    def __init__(self, dx: Pmf, dy: Pmf = None, dz: Pmf = None, sample_count: Optional[int] = None):
        self.factors = (dx, dy or Pmf.point(0), dz or Pmf.point(0))
        self.sample_count = sample_count

    dx = property(lambda self: self.factors[0])
    dy = property(lambda self: self.factors[1])
    dz = property(lambda self: self.factors[2])

    def prob(self, o: Triple) -> float:
        out = 1.0
        for f, k in zip(self.factors, o):
            out *= f.prob(k)
            if out == 0.0:
                break
        return out

    def sample(self, rng: np.random.Generator) -> Triple:
        u = rng.random(3).tolist()
        fx, fy, fz = self.factors
        return (fx.draw(u[0]), fy.draw(u[1]), fz.draw(u[2]))

    def support_size(self) -> int:
        return int(np.prod([f.support.size for f in self.factors]))

    def max_values(self) -> Triple:
        return tuple(f.max_value for f in self.factors)

    def enumerate(self) -> Tuple[np.ndarray, np.ndarray]:
        fx, fy, fz = self.factors
        gx, gy, gz = np.meshgrid(fx.support, fy.support, fz.support, indexing="ij")
        px, py, pz = np.meshgrid(fx.probs, fy.probs, fz.probs, indexing="ij")
        triples = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        return triples, (px * py * pz).ravel()

    def to_dict(self) -> dict:
        d = {"representation": self.kind, "sample_count": self.sample_count}
        for name, f in zip(COUNTERS, self.factors):
            d[name] = f.to_dict()
        return d

    def __eq__(self, other):
        return isinstance(other, FactorizedPmf) and self.factors == other.factors


class JointPmf:
    """Sparse joint pmf over counter triples."""

    kind = "joint"

    def __init__(self, support: np.ndarray, probs: np.ndarray, sample_count: Optional[int] = None):
        support = np.asarray(support, dtype=np.int64).reshape(-1, 3)
        probs = np.asarray(probs, dtype=float)
        if support.shape[0] != probs.size or probs.size == 0:
            raise BadParameters("joint support and probs must match and be non-empty")
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > PMF_TOL:
            raise BadParameters("joint pmf must be non-negative and sum to 1")
        if np.any(support < 0):
            raise BadParameters("counter values must be non-negative")
        order = np.lexsort(support.T[::-1])
        self.support = _frozen(support[order], np.int64)
        self.probs = _frozen(probs[order], float)
        cdf = np.cumsum(self.probs)
        cdf[-1] = 1.0
        self.cdf = _frozen(cdf, float)
        self._index = {tuple(int(v) for v in row): i for i, row in enumerate(self.support)}
        if len(self._index) != probs.size:
            raise BadParameters("duplicate support points")
        self.sample_count = sample_count

    @classmethod
    def from_weights(cls, weights: Mapping[Triple, float], sample_count=None) -> "JointPmf":
        keys = sorted(weights)
        w = np.array([float(weights[k]) for k in keys])
        return cls(np.array(keys), w / w.sum(), sample_count)

    def prob(self, o: Triple) -> float:
        i = self._index.get(tuple(o))
        return 0.0 if i is None else float(self.probs[i])

    def sample(self, rng: np.random.Generator) -> Triple:
        i = min(np.searchsorted(self.cdf, rng.random(), side="right"), self.probs.size - 1)
        return tuple(int(v) for v in self.support[i])

    def support_size(self) -> int:
        return int(self.probs.size)

    def max_values(self) -> Triple:
        return tuple(int(v) for v in self.support.max(axis=0))

    def enumerate(self) -> Tuple[np.ndarray, np.ndarray]:
        return self.support.copy(), self.probs.copy()

    def to_dict(self) -> dict:
        return {
            "representation": self.kind,
            "sample_count": self.sample_count,
            "support": self.support.tolist(),
            "probs": [format(p, ".17g") for p in self.probs],
        }

    def __eq__(self, other):
        return (isinstance(other, JointPmf) and np.array_equal(self.support, other.support)
                and np.array_equal(self.probs, other.probs))


ComponentPmf = Union[FactorizedPmf, JointPmf]


def _component_from_dict(d) -> ComponentPmf:
    if d["representation"] == "joint":
        return JointPmf(np.array(d["support"]), np.array([float(p) for p in d["probs"]]), d.get("sample_count"))
    return FactorizedPmf(*(Pmf.from_dict(d[c]) for c in COUNTERS), sample_count=d.get("sample_count"))


@dataclass(frozen=True, eq=False)
class ObservationModel:
    """Observation distributions keyed by ``(state, phase)``.

    ``bounds`` holds ``(X_max, Y_max, Z_max)``.
    """

    bounds: Triple
    components: Mapping[Tuple[int, int], ComponentPmf]
    name: str = "custom"
    _phases: dict = field(init=False, repr=False)
    _tables: dict = field(init=False, repr=False, default_factory=dict)

    def __post_init__(self):
        bounds = tuple(int(b) for b in self.bounds)
        if len(bounds) != 3 or min(bounds) < 0:
            raise BadParameters("bounds must be three non-negative integers")
        object.__setattr__(self, "bounds", bounds)
        comps = {(int(s), int(ph)): c for (s, ph), c in self.components.items()}
        phases = {0: [], 1: []}
        for (s, ph), c in comps.items():
            if s not in (0, 1):
                raise BadParameters(f"observation pmfs exist only for states 0 and 1, got {s}")
            if s == 0 and ph != 0:
                raise BadParameters("the no-intrusion state has only phase 0")
            if ph < 0:
                raise BadParameters("phases are non-negative")
            if any(m > b for m, b in zip(c.max_values(), bounds)):
                raise BadParameters(f"pmf for key {(s, ph)} exceeds counter bounds {bounds}")
            phases[s].append(ph)
        for s in (0, 1):
            if not phases[s]:
                raise BadParameters(f"no observation pmf for state {s}")
            if 0 in phases[s] and len(phases[s]) > 1:
                raise BadParameters(f"state {s} mixes a phase-independent pmf with phase pmfs")
        object.__setattr__(self, "components", dict(sorted(comps.items())))
        object.__setattr__(self, "_phases", {s: sorted(v) for s, v in phases.items()})

    def phases(self, state) -> list:
        return list(self._phases[int(state)])

    @property
    def phase_dependent(self) -> bool:
        return self._phases[1] != [0]

    def lookup(self, state, phase: int = 0) -> ComponentPmf:
        """The pmf used at ``phase``; phases beyond the last known one are clamped."""
        state = int(state)
        if state not in (0, 1):
            raise UnknownPhase(f"no observation pmf for state {state}")
        known = self._phases[state]
        if known == [0]:
            return self.components[(state, 0)]
        if state == 1 and phase >= 1:
            phase = min(phase, known[-1])
            if (1, phase) in self.components:
                return self.components[(1, phase)]
        raise UnknownPhase(f"no observation pmf for state {state}, phase {phase}")

    def prob(self, o, state, phase: Optional[int] = None) -> float:
        """Probability of ``o`` in ``state``.

        With ``phase=None`` the intrusion state's phases are averaged with equal
        weight, which is the state-conditioned distribution the filter uses.
        """
        state = int(state)
        if state == IntrusionState.TERMINAL:
            return 1.0 if o is None else 0.0
        if o is None:
            return 0.0
        o = as_triple(o)
        if phase is not None:
            return self.lookup(state, phase).prob(o)
        comps = [self.components[(state, ph)] for ph in self._phases[state]]
        return float(sum(c.prob(o) for c in comps) / len(comps))

    def sample(self, state, phase: int, rng: np.random.Generator) -> Triple:
        return self.lookup(state, phase).sample(rng)

    def support_size(self, state) -> int:
        return sum(self.components[(int(state), ph)].support_size() for ph in self._phases[int(state)])

    def enumerate(self, state) -> Tuple[np.ndarray, np.ndarray]:
        """All triples with positive probability in ``state`` (phases averaged)."""
        state = int(state)
        comps = [self.components[(state, ph)] for ph in self._phases[state]]
        acc = {}
        for c in comps:
            triples, probs = c.enumerate()
            for row, pr in zip(map(tuple, triples.tolist()), probs):
                if pr > 0:
                    acc[row] = acc.get(row, 0.0) + pr / len(comps)
        keys = sorted(acc)
        return np.array(keys, dtype=np.int64).reshape(-1, 3), np.array([acc[k] for k in keys])

    def likelihood_table(self, limit: int = 10**4) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(triples, Z(o, 0, C), Z(o, 1, C))`` over the union of both state supports.

        Raises :class:`ObservationSpaceTooLarge` when the alphabet exceeds ``limit``.
        """
        if limit not in self._tables:
            for s in (0, 1):
                if self.support_size(s) > limit:
                    raise ObservationSpaceTooLarge(
                        f"state {s} has {self.support_size(s)} observations; the exact solver allows {limit}")
            t0, p0 = self.enumerate(0)
            t1, p1 = self.enumerate(1)
            rows = sorted(set(map(tuple, t0.tolist())) | set(map(tuple, t1.tolist())))
            if len(rows) > limit:
                raise ObservationSpaceTooLarge(f"{len(rows)} observations; the exact solver allows {limit}")
            index = {r: i for i, r in enumerate(rows)}
            z0 = np.zeros(len(rows))
            z1 = np.zeros(len(rows))
            for r, pr in zip(map(tuple, t0.tolist()), p0):
                z0[index[r]] = pr
            for r, pr in zip(map(tuple, t1.tolist()), p1):
                z1[index[r]] = pr
            triples = _frozen(np.array(rows, dtype=np.int64).reshape(-1, 3), np.int64)
            self._tables[limit] = (triples, _frozen(z0, float), _frozen(z1, float))
        return self._tables[limit]

    def to_dict(self) -> dict:
        return {
            "format": "ipstop-observation-model/1",
            "name": self.name,
            "bounds": list(self.bounds),
            "keys": [
                {"state": s, "phase": ph, **c.to_dict()} for (s, ph), c in self.components.items()
            ],
        }

    @classmethod
    def from_dict(cls, d) -> "ObservationModel":
        comps = {(k["state"], k["phase"]): _component_from_dict(k) for k in d["keys"]}
        return cls(tuple(d["bounds"]), comps, d.get("name", "custom"))

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def __eq__(self, other):
        return (isinstance(other, ObservationModel) and self.bounds == other.bounds
                and self.components == other.components)


def observation_prob(o, s2, a, z: ObservationModel) -> float:
    """``Z(o, s2, a)``: stopping leads to the terminal observation."""
    s2 = IntrusionState(s2)
    if Action(a) == Action.STOP or s2 == IntrusionState.TERMINAL:
        return 1.0 if (o is None and s2 == IntrusionState.TERMINAL) else 0.0
    return z.prob(o, s2)


@dataclass(frozen=True)
class IntrusionPOMDP:
    """Bundle of transition, observation and reward models."""

    observations: ObservationModel
    transition: TransitionModel = TransitionModel()
    rewards: RewardParams = RewardParams()


# --------------------------------------------------------------------------
# belief filter
#
# The array helpers take the observation likelihoods ``z0 = Z(o, 0, C)`` and
# ``z1 = Z(o, 1, C)`` directly so the solver can run them over a whole
# observation alphabet at once.


def predicted_belief(b1, p):
    """Probability of being in state 1 after one continue transition."""
    return b1 + (1 - b1) * p


def continue_marginal(b1, p, z0, z1):
    pred = predicted_belief(b1, p)
    return pred * z1 + (1 - pred) * z0


def continue_posterior(b1, p, z0, z1):
    pred = predicted_belief(b1, p)
    num = pred * z1
    den = num + (1 - pred) * z0
    return num, den


def obs_marginal(b1: float, a, o, m: TransitionModel, z: ObservationModel) -> float:
    if Action(a) == Action.STOP:
        return 1.0 if o is None else 0.0
    if o is None:
        return 0.0
    return float(continue_marginal(b1, m.p, z.prob(o, 0), z.prob(o, 1)))


def belief_update(b1: float, a, o, m: TransitionModel, z: ObservationModel) -> float:
    """Bayes filter: posterior probability of an ongoing intrusion after ``(a, o)``."""
    if Action(a) == Action.STOP:
        raise ValueError("the belief is undefined once the defender has stopped")
    if o is None:
        raise ZeroProbabilityObservation("terminal observation after a continue action")
    num, den = continue_posterior(b1, m.p, z.prob(o, 0), z.prob(o, 1))
    if den < NORMALIZER_FLOOR:
        raise ZeroProbabilityObservation(f"observation {as_triple(o)} has probability {den!r} at b1={b1}")
    return min(1.0, max(0.0, float(num / den)))
