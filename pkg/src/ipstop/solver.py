"""Exact alpha-vector value iteration for the two-state stopping POMDP.

The belief space is the interval ``b1 in [0, 1]``, so an alpha vector is a
line ``v0 * (1 - b1) + v1 * b1`` and pruning reduces to computing the upper
envelope of a set of lines on ``[0, 1]``.

Attacker phases are not modelled here: the intrusion state's observation
distribution is the phase average returned by
:meth:`ObservationModel.likelihood_table`.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from .errors import BadParameters, DegenerateDenominator, NonIntervalStoppingSet, NotConverged
from .model import Action, IntrusionPOMDP, belief_reward, continue_marginal, continue_posterior

MAX_OBSERVATIONS = 10**4
TIE_TOL = 1e-9
PRUNE_TOL = 1e-12
BISECTION_TOL = 1e-6
TIDY_PASSES = 32


@dataclass(frozen=True)
class SolverConfig:
    gamma: float = 1.0
    max_iterations: int = 500
    tolerance: float = 1e-9
    belief_grid_size: int = 1001

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise BadParameters("gamma must lie in (0, 1]")
        if self.tolerance <= 0:
            raise BadParameters("tolerance must be positive")
        if self.belief_grid_size < 2:
            raise BadParameters("belief_grid_size must be at least 2")
        if self.max_iterations < 1:
            raise BadParameters("max_iterations must be at least 1")


@dataclass(frozen=True)
class ValueFunction:
    """Pruned alpha vectors, rows ``(v0, v1)`` sorted by increasing slope."""

    vectors: np.ndarray
    gamma: float = 1.0
    iterations: int = 0
    converged: bool = True
    residual: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "vectors", upper_envelope(self.vectors))

    def __call__(self, b1):
        return value_at(self, b1)

    def breakpoints(self) -> np.ndarray:
        return envelope_breakpoints(self.vectors)

    def to_dict(self) -> dict:
        return {
            "vectors": self.vectors.tolist(),
            "gamma": self.gamma,
            "iterations": self.iterations,
            "converged": self.converged,
            "residual": self.residual,
        }


@dataclass(frozen=True)
class ThresholdAnalysis:
    alpha_star: float
    grid: np.ndarray
    curve: np.ndarray  # b1 - alpha_{b1} on the grid
    values: np.ndarray  # V*(b1) on the grid
    stop_mask: np.ndarray

    @property
    def stopping_set(self) -> Tuple[float, float]:
        return (self.alpha_star, 1.0)

    def to_dict(self) -> dict:
        return {
            "alpha_star": self.alpha_star,
            "b1": self.grid.tolist(),
            "b1_minus_alpha": self.curve.tolist(),
            "value": self.values.tolist(),
            "stop": [bool(v) for v in self.stop_mask],
        }

    @classmethod
    def from_dict(cls, d) -> "ThresholdAnalysis":
        return cls(float(d["alpha_star"]), np.asarray(d["b1"], dtype=float),
                   np.asarray(d["b1_minus_alpha"], dtype=float), np.asarray(d["value"], dtype=float),
                   np.asarray(d["stop"], dtype=bool))


def upper_envelope(vectors, tol: float = PRUNE_TOL) -> np.ndarray:
    """Keep only the lines that are maximal somewhere on ``[0, 1]``, ordered by slope.

    Monotone-stack hull over lines sorted by slope. A line is dropped when
    removing it lowers the envelope by at most ``tol`` anywhere on ``[0, 1]``.
    """
    v = np.asarray(vectors, dtype=float).reshape(-1, 2)
    if v.shape[0] <= 1:
        return v.copy()
    icpt, slope = v[:, 0], v[:, 1] - v[:, 0]
    order = np.lexsort((icpt, slope))
    ai, si = icpt[order].tolist(), slope[order].tolist()
    hull = []
    for k in range(len(ai)):
        a, s = ai[k], si[k]
        if hull and s == si[hull[-1]]:
            hull.pop()  # parallel and no higher (sorted by intercept within a slope)
        while len(hull) >= 2:
            i, j = hull[-2], hull[-1]
            x = (ai[i] - ai[j]) / (si[j] - si[i])
            if a + s * x >= ai[j] + si[j] * x - tol:
                hull.pop()
            else:
                break
        hull.append(k)
    while len(hull) >= 2 and ai[hull[1]] >= ai[hull[0]] - tol:
        hull.pop(0)
    while len(hull) >= 2 and ai[hull[-2]] + si[hull[-2]] >= ai[hull[-1]] + si[hull[-1]] - tol:
        hull.pop()
    return v[order[hull]].copy()


def _envelope_eval(env: np.ndarray, b1: np.ndarray) -> np.ndarray:
    """Envelope value at each point: locate the piece by its breakpoints, then
    take the best of that piece and its neighbours to absorb rounding."""
    b1 = np.asarray(b1, dtype=float).ravel()
    if env.shape[0] == 1:
        return env[0, 0] * (1 - b1) + env[0, 1] * b1
    idx = np.searchsorted(_crossings(env), b1)
    best = np.full(b1.shape, -np.inf)
    for off in (-1, 0, 1):
        k = np.clip(idx + off, 0, env.shape[0] - 1)
        best = np.maximum(best, env[k, 0] * (1 - b1) + env[k, 1] * b1)
    return best


def envelope_breakpoints(vectors: np.ndarray) -> np.ndarray:
    """Belief points where consecutive envelope pieces meet, plus 0 and 1."""
    v = np.asarray(vectors, dtype=float)
    pts = np.clip(_crossings(v), 0.0, 1.0) if v.shape[0] > 1 else np.empty(0)
    return np.unique(np.concatenate([[0.0, 1.0], pts]))


def _crossings(env: np.ndarray) -> np.ndarray:
    """Belief where each envelope piece hands over to the next (slope-sorted input)."""
    slope = env[:, 1] - env[:, 0]
    return (env[:-1, 0] - env[1:, 0]) / (slope[1:] - slope[:-1])


def _is_envelope(v: np.ndarray) -> bool:
    if v.shape[0] <= 1:
        return True
    slope = v[:, 1] - v[:, 0]
    if not np.all(np.diff(slope) > 0):
        return False
    c = _crossings(v)
    return bool(c[0] > 0.0 and c[-1] < 1.0 and np.all(np.diff(c) > 0))


def _with_line(env: np.ndarray, line: np.ndarray) -> np.ndarray:
    """Envelope of ``env`` plus one extra line.

    ``env - line`` is convex, so the line wins on at most one interval; the
    pieces it covers completely are removed and it slots in by slope.
    """
    if env.shape[0] > 1 and not _is_envelope(env):
        env = _tidy(env)
    if env.shape[0] == 1 or not _is_envelope(env):
        return upper_envelope(np.vstack([env, line]))
    pts = np.concatenate([[0.0], _crossings(env), [1.0]])
    d = _envelope_eval(env, pts) - (line[0] * (1 - pts) + line[1] * pts)
    if np.all(d >= 0):
        return env
    slope = env[:, 1] - env[:, 0]
    sl = line[1] - line[0]
    if np.any(slope == sl):
        return upper_envelope(np.vstack([env, line]))
    above = np.maximum(d[:-1], d[1:]) > 0
    left, right = env[above & (slope < sl)], env[above & (slope > sl)]
    return _tidy(np.vstack([left, line[None, :], right]))


def _tidy(env: np.ndarray, tol: float = PRUNE_TOL) -> np.ndarray:
    """Clean a slope-ordered piece list with the same rule as :func:`upper_envelope`:
    a piece goes when its neighbours come within ``tol`` of it everywhere.

    A few vectorized passes clear isolated pieces; cascades go to the hull.
    """
    for _ in range(TIDY_PASSES):
        if env.shape[0] <= 1:
            return env
        a, s = env[:, 0], env[:, 1] - env[:, 0]
        drop = np.zeros(env.shape[0], dtype=bool)
        flat = np.flatnonzero(np.diff(s) <= 0)
        if flat.size:
            # equal slopes: the lower intercept can never win
            drop[np.where(a[flat] >= a[flat + 1], flat + 1, flat)] = True
        else:
            drop[0] = a[1] >= a[0] - tol
            drop[-1] = a[-2] + s[-2] >= a[-1] + s[-1] - tol
            if env.shape[0] > 2:
                x = (a[:-2] - a[2:]) / (s[2:] - s[:-2])
                excess = a[1:-1] + s[1:-1] * x - (a[:-2] + s[:-2] * x)
                mid = np.flatnonzero(excess <= tol) + 1
                if mid.size:
                    # never drop two neighbours in one pass
                    mid = mid[np.concatenate([[True], np.diff(mid) > 1])]
                    drop[mid] = True
        if not drop.any():
            return env
        if drop.all():
            drop[np.argmax(a + s)] = False
        env = env[~drop]
    return upper_envelope(env, tol)


def envelope_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Upper envelope of ``{x + y : x in a, y in b}`` for two envelopes.

    The sum of two convex piecewise-linear functions breaks only where one of
    them does, so the pieces come from merging the two breakpoint lists
    instead of forming all ``len(a) * len(b)`` pairs.
    """
    xa, xb = _crossings(a), _crossings(b)
    events = np.union1d(xa, xb)
    i = np.concatenate([[0], np.searchsorted(xa, events, side="right")])
    j = np.concatenate([[0], np.searchsorted(xb, events, side="right")])
    return _tidy(a[i] + b[j])


def _projection(env: np.ndarray, cross: np.ndarray, p: float, z0: float, z1: float, gamma: float) -> np.ndarray:
    """Envelope of ``b1 -> gamma * Pr(o | b1) * V(posterior(b1, o))`` for one observation.

    Only the pieces of ``V`` active on the posterior's range ``[post(0), 1]``
    survive, and they keep their order.
    """
    if z1 == 0.0:
        lo_piece, hi_piece = 0, 1
    else:
        lo = p * z1 / (p * z1 + (1 - p) * z0)
        lo_piece, hi_piece = int(np.searchsorted(cross, lo)), env.shape[0]
    sub = env[lo_piece:hi_piece]
    w0, w1 = z0 * sub[:, 0], z1 * sub[:, 1]
    return _tidy(gamma * np.stack([(1 - p) * w0 + p * w1, w1], axis=1))


def value_at(V: ValueFunction, b1):
    """Upper envelope of the alpha vectors at ``b1`` (scalar or array)."""
    out = _envelope_eval(V.vectors, b1)
    return float(out[0]) if np.ndim(b1) == 0 else out.reshape(np.shape(b1))


def sup_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Exact sup-norm distance between two piecewise-linear envelopes."""
    pts = np.union1d(envelope_breakpoints(a), envelope_breakpoints(b))
    return float(np.max(np.abs(_envelope_eval(a, pts) - _envelope_eval(b, pts))))


def _likelihoods(pomdp: IntrusionPOMDP):
    _, z0, z1 = pomdp.observations.likelihood_table(MAX_OBSERVATIONS)
    return z0, z1


def bellman_backup(vectors: np.ndarray, pomdp: IntrusionPOMDP, gamma: float = 1.0) -> np.ndarray:
    """One exact backup: stop vector plus the cross-sum of continue projections.

    The cross-sum is accumulated one observation at a time with :func:`envelope_sum`.
    """
    p = pomdp.transition.p
    z0, z1 = _likelihoods(pomdp)
    env = np.asarray(vectors, dtype=float).reshape(-1, 2)
    if not _is_envelope(env):
        env = upper_envelope(env)
    cross = _crossings(env)
    acc = np.zeros((1, 2))
    for zj0, zj1 in zip(z0, z1):
        if zj0 == 0.0 and zj1 == 0.0:
            continue
        acc = envelope_sum(acc, _projection(env, cross, p, zj0, zj1, gamma))
    return _with_line(acc + pomdp.rewards.continue_vector, pomdp.rewards.stop_vector)


def value_iteration(pomdp: IntrusionPOMDP, cfg: SolverConfig = SolverConfig()) -> ValueFunction:
    """Backups from the forced-stop value until the sup-norm change is within tolerance."""
    vectors = pomdp.rewards.stop_vector[None, :].copy()
    residual = np.inf
    for it in range(1, cfg.max_iterations + 1):
        new = bellman_backup(vectors, pomdp, cfg.gamma)
        residual = sup_distance(new, vectors)
        vectors = new
        if residual <= cfg.tolerance:
            return ValueFunction(vectors, cfg.gamma, it, True, residual)
    raise NotConverged(residual, cfg.max_iterations)


def q_values(V: ValueFunction, pomdp: IntrusionPOMDP, b1: float) -> Tuple[float, float]:
    """One-step lookahead values of stopping and continuing at ``b1``."""
    z0, z1 = _likelihoods(pomdp)
    num, den = continue_posterior(b1, pomdp.transition.p, z0, z1)
    live = den > 0
    post = num[live] / den[live]
    future = float(np.dot(continue_marginal(b1, pomdp.transition.p, z0[live], z1[live]), value_at(V, post)))
    q_stop = float(belief_reward(b1, Action.STOP, pomdp.rewards))
    q_cont = float(belief_reward(b1, Action.CONTINUE, pomdp.rewards)) + V.gamma * future
    return q_stop, q_cont


def optimal_action(V: ValueFunction, pomdp: IntrusionPOMDP, b1: float) -> Action:
    q_stop, q_cont = q_values(V, pomdp, b1)
    return Action.STOP if q_stop >= q_cont - TIE_TOL else Action.CONTINUE


def _threshold_terms(V: ValueFunction, pomdp: IntrusionPOMDP, b1: float) -> Tuple[float, float]:
    p, r = pomdp.transition.p, pomdp.rewards
    z0, z1 = _likelihoods(pomdp)
    num, den = continue_posterior(b1, p, z0, z1)
    # where the posterior is undefined its weight cancels from the stop test
    w = np.zeros_like(z0)
    live = den > 0
    w[live] = value_at(V, num[live] / den[live])
    prior_mix = p * z1 + (1 - p) * z0
    m = V.gamma * float(np.dot(w, prior_mix))
    d = V.gamma * float(np.dot(w, z1))
    numerator = r.r_service - r.r_early_stop + m
    denominator = r.r_stop_intrusion - r.r_early_stop - r.r_intruded + m - d
    return numerator, denominator


def belief_threshold(V: ValueFunction, pomdp: IntrusionPOMDP, b1: float) -> float:
    """Belief level ``alpha_{b1}`` such that stopping at ``b1`` is optimal iff ``b1 >= alpha_{b1}``.

    With the default rewards the constants reduce to ``(110 + M) / (300 + M - D)``.
    """
    numerator, denominator = _threshold_terms(V, pomdp, b1)
    if abs(denominator) < 1e-9:
        raise DegenerateDenominator(f"denominator {denominator!r} at b1={b1}")
    return numerator / denominator


def threshold_rule_action(V: ValueFunction, pomdp: IntrusionPOMDP, b1: float) -> Action:
    """Stop decision from the threshold form, with the same tie rule as :func:`optimal_action`."""
    numerator, denominator = _threshold_terms(V, pomdp, b1)
    if denominator <= 0:
        raise DegenerateDenominator(f"non-positive denominator {denominator!r} at b1={b1}")
    return Action.STOP if b1 * denominator - numerator >= -TIE_TOL else Action.CONTINUE


def _stops(V, pomdp, b1) -> bool:
    return optimal_action(V, pomdp, b1) == Action.STOP


def stopping_set(V: ValueFunction, pomdp: IntrusionPOMDP, grid_size: int = 1001) -> ThresholdAnalysis:
    """Classify a belief grid, check the stop region is ``[alpha*, 1]`` and locate ``alpha*``."""
    if grid_size < 100:
        raise BadParameters("grid_size must be at least 100")
    grid = np.linspace(0.0, 1.0, grid_size)
    mask = np.array([_stops(V, pomdp, b) for b in grid])
    if not mask[-1]:
        raise NonIntervalStoppingSet("b1 = 1 is not in the stopping set")
    first = int(np.argmax(mask))
    if not mask[first:].all():
        gaps = grid[first:][~mask[first:]]
        raise NonIntervalStoppingSet(f"stop region is not an interval; continue at b1={gaps[0]:.6g}")
    if first == 0:
        alpha = 0.0
    else:
        lo, hi = grid[first - 1], grid[first]
        while hi - lo > BISECTION_TOL:
            mid = 0.5 * (lo + hi)
            if _stops(V, pomdp, mid):
                hi = mid
            else:
                lo = mid
        alpha = hi
    curve = np.array([b - belief_threshold(V, pomdp, b) for b in grid])
    return ThresholdAnalysis(float(alpha), grid, curve, value_at(V, grid), mask)


def episode_start_value(V: ValueFunction, pomdp: IntrusionPOMDP) -> float:
    """Optimal expected return of a simulated episode.

    Episodes start from belief 0 and the first observation is emitted before
    the first decision, so the value is ``E_o[V*(b_o)]`` from belief 0.
    """
    z0, z1 = _likelihoods(pomdp)
    p = pomdp.transition.p
    num, den = continue_posterior(0.0, p, z0, z1)
    live = den > 0
    return float(np.dot(den[live], value_at(V, num[live] / den[live])))
