"""Actor-critic PPO with generalized advantage estimation, in numpy.

The network sees either the history summary ``(x, y, z, t)`` or, behind the
``features="belief"`` switch, the Bayes-filter belief. Rewards are multiplied
by ``reward_scale`` inside the learner only; evaluation metrics are always in
raw reward units.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import nn
from . import rng as rngmod
from .errors import BadParameters, NonFiniteGradient
from .model import Action
from .policies import FEATURE_MODES, FirstAlert, FixedTime, NeuralPolicy, Oracle
from .sim import EndReason, EnvConfig, Episode, Metrics, run_batch


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 5e-4
    batch_steps: int = 4000
    updates_per_iteration: int = 10
    clip_epsilon: float = 0.2
    gae_lambda: float = 0.95
    entropy_coef: float = 5e-4
    gamma: float = 1.0
    iterations: int = 100
    eval_episodes: int = 200
    seed: int = 0
    hidden: Tuple[int, ...] = (64, 64, 64)
    minibatches: int = 4
    value_coef: float = 0.5
    reward_scale: float = 0.01
    max_grad_norm: Optional[float] = 0.5
    normalize_advantages: bool = True
    features: str = "summary"
    deterministic_eval: bool = True

    def __post_init__(self):
        if self.clip_epsilon <= 0:
            raise BadParameters("clip_epsilon must be positive")
        if not 0 <= self.gae_lambda <= 1:
            raise BadParameters("gae_lambda must lie in [0, 1]")
        if self.batch_steps < 1 or self.minibatches < 1:
            raise BadParameters("batch_steps and minibatches must be at least 1")
        if self.features not in FEATURE_MODES:
            raise BadParameters(f"features must be one of {FEATURE_MODES}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class Trajectory:
    features: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    episode_end: np.ndarray
    bootstrap: np.ndarray  # value after the step, read only where episode_end

    def __len__(self):
        return self.rewards.size


@dataclass
class PPOBatch:
    features: np.ndarray
    actions: np.ndarray
    old_logp: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def subset(self, idx) -> "PPOBatch":
        return PPOBatch(self.features[idx], self.actions[idx], self.old_logp[idx], self.advantages[idx],
                        self.returns[idx])


def gae_advantages(traj: Trajectory, gamma: float, lam: float) -> Tuple[np.ndarray, np.ndarray]:
    """Advantages ``sum_l (gamma*lam)^l delta_{t+l}`` reset at episode ends, and returns."""
    n = len(traj)
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        if traj.episode_end[t] or t == n - 1:
            next_v, last = traj.bootstrap[t], 0.0
        else:
            next_v = traj.values[t + 1]
        delta = traj.rewards[t] + gamma * next_v - traj.values[t]
        last = delta + gamma * lam * last
        adv[t] = last
    return adv, adv + traj.values


def clipped_surrogate(ratio, adv, eps):
    return np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)


def ppo_loss(params: nn.PolicyParams, batch: PPOBatch, cfg: TrainerConfig):
    """Total loss and its gradient.

    ``loss = -mean(surrogate) + value_coef * 0.5 * mean((V - R)^2) - entropy_coef * mean(H)``
    """
    n = batch.actions.size
    logits, values, cache = nn.forward(params, batch.features, keep_cache=True)
    logp_all = nn.log_softmax(logits)
    probs = np.exp(logp_all)
    rows = np.arange(n)
    logp = logp_all[rows, batch.actions]
    ratio = np.exp(logp - batch.old_logp)
    adv, eps = batch.advantages, cfg.clip_epsilon
    surr = clipped_surrogate(ratio, adv, eps)
    unclipped = ratio * adv
    active = (unclipped <= np.clip(ratio, 1 - eps, 1 + eps) * adv) | ((ratio >= 1 - eps) & (ratio <= 1 + eps))
    dsurr_dlogp = np.where(active, unclipped, 0.0)
    onehot = np.zeros_like(probs)
    onehot[rows, batch.actions] = 1.0
    entropy = -(probs * logp_all).sum(axis=1)
    dlogits = -(dsurr_dlogp / n)[:, None] * (onehot - probs)
    dlogits += (cfg.entropy_coef / n) * probs * (logp_all + entropy[:, None])
    err = values - batch.returns
    value_loss = 0.5 * np.mean(err ** 2)
    dvalues = cfg.value_coef * err / n
    loss = -surr.mean() + cfg.value_coef * value_loss - cfg.entropy_coef * entropy.mean()
    grads = nn.backward(params, cache, dlogits, dvalues)
    info = {
        "policy_loss": float(-surr.mean()),
        "value_loss": float(value_loss),
        "entropy": float(entropy.mean()),
        "clip_fraction": float(np.mean(np.abs(ratio - 1) > eps)),
        "max_ratio_deviation": float(np.max(np.abs(ratio - 1))) if n else 0.0,
    }
    return float(loss), grads, info


def _check_finite(grads: nn.PolicyParams, params: nn.PolicyParams) -> None:
    for name, (W, b) in zip(["trunk%d" % i for i in range(len(params.trunk))] + ["actor", "critic"], grads.layers):
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise NonFiniteGradient(name)


class Adam:
    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_batch(params: nn.PolicyParams, traj: Trajectory, cfg: TrainerConfig) -> PPOBatch:
    """Advantages, returns and behaviour log-probabilities for one update."""
    adv, ret = gae_advantages(traj, cfg.gamma, cfg.gae_lambda)
    if cfg.normalize_advantages and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    # recomputed in one batched pass so the first epoch starts at ratio 1
    logits, _ = nn.forward(params, traj.features)
    old_logp = nn.log_softmax(logits)[np.arange(len(traj)), traj.actions]
    return PPOBatch(traj.features, traj.actions, old_logp, adv, ret)


def ppo_update(params: nn.PolicyParams, traj: Trajectory, cfg: TrainerConfig, optimizer: Adam = None,
               rng: np.random.Generator = None):
    """``updates_per_iteration`` epochs of shuffled minibatch Adam steps on the PPO loss."""
    rng = rng if rng is not None else np.random.default_rng(0)
    optimizer = optimizer if optimizer is not None else Adam(params.n_params, cfg.learning_rate)
    batch = make_batch(params, traj, cfg)
    n = len(traj)
    theta = params.flat()
    infos = []
    for _ in range(cfg.updates_per_iteration):
        for idx in np.array_split(rng.permutation(n), min(cfg.minibatches, n)):
            _, grads, info = ppo_loss(params, batch.subset(idx), cfg)
            _check_finite(grads, params)
            g = grads.flat()
            norm = float(np.linalg.norm(g))
            if cfg.max_grad_norm is not None and norm > cfg.max_grad_norm:
                g = g * (cfg.max_grad_norm / norm)
            theta = optimizer.step(theta, g)
            params = params.with_flat(theta)
            info["grad_norm"] = norm
            infos.append(info)
    diag = {k: float(np.mean([i[k] for i in infos])) for k in infos[0]} if infos else {}
    return params, diag


def finite_diff_check(params: nn.PolicyParams, batch: PPOBatch, cfg: TrainerConfig, grad: np.ndarray = None,
                      step: float = 1e-5, floor: float = 1e-6) -> Tuple[float, int]:
    """Worst relative error between ``grad`` (analytic by default) and central differences.

    The error at component ``i`` is ``|g_i - fd_i| / max(|fd_i|, floor)``.
    """
    if params.n_params > 1000:
        raise BadParameters("finite-difference check is limited to 1000 parameters")
    if grad is None:
        grad = ppo_loss(params, batch, cfg)[1].flat()
    theta = params.flat()
    fd = np.empty_like(theta)
    for i in range(theta.size):
        up, down = theta.copy(), theta.copy()
        up[i] += step
        down[i] -= step
        fd[i] = (ppo_loss(params.with_flat(up), batch, cfg)[0] - ppo_loss(params.with_flat(down), batch, cfg)[0]) / (2 * step)
    err = np.abs(grad - fd) / np.maximum(np.abs(fd), floor)
    i = int(np.argmax(err))
    return float(err[i]), i


# --------------------------------------------------------------------------
# rollouts and training


def make_policy(params: nn.PolicyParams, env: EnvConfig, cfg: TrainerConfig, deterministic: bool = False) -> NeuralPolicy:
    return NeuralPolicy(params, cfg.features, env.observations.bounds, env.max_steps, deterministic)


def collect_rollout(params: nn.PolicyParams, env: EnvConfig, cfg: TrainerConfig, iteration: int):
    """Whole episodes until at least ``batch_steps`` steps are collected."""
    policy = make_policy(params, env, cfg)
    feats, acts, logps, rews, vals, ends, boots = [], [], [], [], [], [], []
    episodes = 0
    while len(rews) < cfg.batch_steps:
        ep = Episode(env, rngmod.stream(cfg.seed, "rollout", iteration, episodes), track_belief=cfg.features == "belief")
        episodes += 1
        while not ep.done:
            x = policy.featurize(ep.inputs())
            logits, value = nn.forward(params, x[None, :])
            logp = nn.log_softmax(logits)[0]
            a = Action.STOP if ep.rng.random() < np.exp(logp[Action.STOP]) else Action.CONTINUE
            r = ep.step(a)
            feats.append(x)
            acts.append(int(a))
            logps.append(logp[a])
            rews.append(r * cfg.reward_scale)
            vals.append(value[0])
            ends.append(ep.done)
            boots.append(0.0)
        if ep.end_reason == EndReason.MAX_STEPS:
            # truncated, not terminal: bootstrap from the critic at the last state
            boots[-1] = vals[-1]
    traj = Trajectory(np.array(feats), np.array(acts), np.array(logps), np.array(rews), np.array(vals),
                      np.array(ends), np.array(boots))
    return traj, episodes


@dataclass
class TrainResult:
    params: nn.PolicyParams
    policy: NeuralPolicy
    curve: List[dict] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)
    baselines: dict = field(default_factory=dict)


BASELINES = (("fixed6", FixedTime(6)), ("first_alert", FirstAlert()), ("oracle", Oracle()))


def _prefixed(prefix: str, m: Metrics) -> dict:
    return {f"{prefix}_{k}": v for k, v in m.to_dict().items() if k != "episodes"}


def train(env: EnvConfig, cfg: TrainerConfig = TrainerConfig(),
          on_iteration: Callable[[int, nn.PolicyParams, dict], None] = None) -> TrainResult:
    """Rollout, GAE, PPO update and evaluation, ``cfg.iterations`` times.

    Evaluation episodes reuse one seed every iteration, and the baselines and
    the oracle are evaluated once on that same seed.
    """
    input_dim = 4 if cfg.features == "summary" else 1
    params = nn.init_params(input_dim, cfg.hidden, rngmod.stream(cfg.seed, "init"))
    optimizer = Adam(params.n_params, cfg.learning_rate)
    eval_seed = rngmod.derive_seed(cfg.seed, "eval")
    result = TrainResult(params, make_policy(params, env, cfg, cfg.deterministic_eval))
    if cfg.iterations <= 0:
        return result
    for name, pol in BASELINES:
        result.baselines.update(_prefixed(name, run_batch(pol, env, cfg.eval_episodes, eval_seed)[1]))
    for it in range(cfg.iterations):
        start = time.perf_counter()
        traj, episodes = collect_rollout(params, env, cfg, it)
        params, diag = ppo_update(params, traj, cfg, optimizer, rngmod.stream(cfg.seed, "minibatch", it))
        policy = make_policy(params, env, cfg, cfg.deterministic_eval)
        _, metrics = run_batch(policy, env, cfg.eval_episodes, eval_seed)
        record = {"iteration": it + 1, "rollout_episodes": episodes, "rollout_steps": len(traj),
                  **_prefixed("policy", metrics), **result.baselines, **diag}
        result.curve.append(record)
        result.seconds.append(time.perf_counter() - start)
        if on_iteration is not None:
            on_iteration(it + 1, params, record)
    result.params = params
    result.policy = make_policy(params, env, cfg, cfg.deterministic_eval)
    return result
