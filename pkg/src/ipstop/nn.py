"""A small actor-critic MLP in plain numpy with hand-written backprop.

Shared ReLU trunk, two heads: two action logits ordered ``(stop, continue)``
and a scalar value.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

Layer = Tuple[np.ndarray, np.ndarray]


@dataclass
class PolicyParams:
    trunk: List[Layer]
    actor: Layer
    critic: Layer

    @property
    def layers(self) -> List[Layer]:
        return [*self.trunk, self.actor, self.critic]

    @property
    def input_dim(self) -> int:
        return (self.trunk[0][0] if self.trunk else self.actor[0]).shape[0]

    @property
    def hidden(self) -> Tuple[int, ...]:
        return tuple(W.shape[1] for W, _ in self.trunk)

    @property
    def shapes(self) -> List[Tuple[Tuple[int, ...], Tuple[int, ...]]]:
        return [(W.shape, b.shape) for W, b in self.layers]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in self.layers)

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for W, b in self.layers for a in (W, b)])

    def with_flat(self, theta: np.ndarray) -> "PolicyParams":
        out, i = [], 0
        for W, b in self.layers:
            nW, nb = W.size, b.size
            out.append((theta[i:i + nW].reshape(W.shape).copy(), theta[i + nW:i + nW + nb].reshape(b.shape).copy()))
            i += nW + nb
        return PolicyParams(out[:-2], out[-2], out[-1])

    def copy(self) -> "PolicyParams":
        return self.with_flat(self.flat())

    def component_names(self) -> List[str]:
        names = [f"trunk{i}" for i in range(len(self.trunk))] + ["actor", "critic"]
        return [f"{n}.{part}" for n in names for part in ("W", "b")]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "hidden": list(self.hidden),
            "layers": [
                {"W_shape": list(W.shape), "b_shape": list(b.shape),
                 "W": [format(v, ".17g") for v in W.ravel()], "b": [format(v, ".17g") for v in b.ravel()]}
                for W, b in self.layers
            ],
        }

    @classmethod
    def from_dict(cls, d) -> "PolicyParams":
        layers = [
            (np.array([float(v) for v in L["W"]]).reshape(L["W_shape"]),
             np.array([float(v) for v in L["b"]]).reshape(L["b_shape"]))
            for L in d["layers"]
        ]
        return cls(layers[:-2], layers[-2], layers[-1])


def _orthogonal(rng: np.random.Generator, n_in: int, n_out: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(n_in, n_out), min(n_in, n_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if n_in < n_out:
        q = q.T
    return gain * q[:n_in, :n_out]


def init_params(input_dim: int, hidden: Sequence[int] = (64, 64, 64), rng: np.random.Generator = None,
                actor_gain: float = 0.01, critic_gain: float = 1.0) -> PolicyParams:
    rng = rng if rng is not None else np.random.default_rng(0)
    trunk, n_in = [], input_dim
    for h in hidden:
        trunk.append((_orthogonal(rng, n_in, h, np.sqrt(2.0)), np.zeros(h)))
        n_in = h
    actor = (_orthogonal(rng, n_in, 2, actor_gain), np.zeros(2))
    critic = (_orthogonal(rng, n_in, 1, critic_gain), np.zeros(1))
    return PolicyParams(trunk, actor, critic)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def forward(params: PolicyParams, X: np.ndarray, keep_cache: bool = False):
    """Return ``(logits, values)``, plus the activation cache when requested."""
    h = np.atleast_2d(np.asarray(X, dtype=float))
    cache = [h]
    for W, b in params.trunk:
        h = np.maximum(h @ W + b, 0.0)
        cache.append(h)
    logits = h @ params.actor[0] + params.actor[1]
    values = (h @ params.critic[0] + params.critic[1])[:, 0]
    if keep_cache:
        return logits, values, cache
    return logits, values


def action_probs(params: PolicyParams, X: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    logits, values = forward(params, X)
    return np.exp(log_softmax(logits)), values


def backward(params: PolicyParams, cache, dlogits: np.ndarray, dvalues: np.ndarray) -> PolicyParams:
    """Gradients of a scalar loss given its gradients w.r.t. logits and values."""
    h = cache[-1]
    dWa, dba = h.T @ dlogits, dlogits.sum(axis=0)
    dv = dvalues[:, None]
    dWc, dbc = h.T @ dv, dv.sum(axis=0)
    dh = dlogits @ params.actor[0].T + dv @ params.critic[0].T
    trunk_grads = []
    for i in range(len(params.trunk) - 1, -1, -1):
        W, _ = params.trunk[i]
        dpre = dh * (cache[i + 1] > 0)
        trunk_grads.append((cache[i].T @ dpre, dpre.sum(axis=0)))
        dh = dpre @ W.T
    return PolicyParams(trunk_grads[::-1], (dWa, dba), (dWc, dbc))
