"""Clipped-surrogate fine-tuning on the collection batch."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, NamedTuple, Optional, Tuple

import numpy as np

from trpoppo import kernels
from trpoppo.autodiff import Graph, ParamVector
from trpoppo.networks import (
    PolicyNet,
    ValueNet,
    build_policy,
    build_value,
    clamp_log_std,
    graph_entropy,
    graph_log_prob,
)
from trpoppo.rollout import TrajectoryBatch


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.2
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    epochs: int = 10
    minibatch_size: int = 64
    learning_rate: float = 3e-4
    max_grad_norm: float = 0.5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.clip_eps < 1.0:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.epochs < 1 or self.minibatch_size < 1:
            raise ValueError("epochs and minibatch_size must be >= 1")
        if self.learning_rate < 0 or self.max_grad_norm <= 0:
            raise ValueError("learning_rate must be >= 0 and max_grad_norm > 0")


def clipped_term(ratio, advantage, clip_eps: float):
    """min(r * A, clip(r, 1 - eps, 1 + eps) * A), elementwise."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    out = np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage)
    return float(out) if out.ndim == 0 else out


class PpoGraph(NamedTuple):
    graph: Graph
    loss: object
    policy_loss: object
    value_loss: object
    entropy: object
    approx_kl: object


@lru_cache(maxsize=None)
def _ppo_graph(obs_dim, act_dim, pi_hidden, v_hidden, clip_eps, value_coef, entropy_coef) -> PpoGraph:
    g = Graph()
    obs = g.input("obs", (None, obs_dim))
    actions = g.input("actions", (None, act_dim))
    logp_old = g.input("logp_old", (None,))
    adv = g.input("adv", (None,))
    returns = g.input("returns", (None,))
    mean, log_std = build_policy(g, PolicyNet(obs_dim, act_dim, pi_hidden, ParamVector.from_arrays({})), obs)
    v = build_value(g, ValueNet(obs_dim, v_hidden, ParamVector.from_arrays({})), obs)
    log_ratio = graph_log_prob(mean, log_std, actions) - logp_old
    ratio = log_ratio.exp()
    clipped = g.minimum(ratio * adv, g.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv)
    policy_loss = -clipped.mean()
    value_loss = ((v - returns).square() * 0.5).mean()
    ent = graph_entropy(log_std)
    loss = policy_loss + value_loss * value_coef - ent * entropy_coef
    approx_kl = (-log_ratio).mean()
    return PpoGraph(g, loss, policy_loss, value_loss, ent, approx_kl)


def ppo_graph(policy: PolicyNet, value: ValueNet, config: PpoConfig) -> PpoGraph:
    return _ppo_graph(
        policy.obs_dim,
        policy.act_dim,
        tuple(policy.hidden),
        tuple(value.hidden),
        float(config.clip_eps),
        float(config.value_coef),
        float(config.entropy_coef),
    )


def _feed(batch: TrajectoryBatch, params: ParamVector) -> dict:
    if len(batch) == 0:
        raise ValueError("empty minibatch")
    if batch.advantages is None or batch.returns is None:
        raise ValueError("advantages and returns must be computed first")
    feed = params.unflatten()
    feed.update(
        obs=batch.obs,
        actions=batch.actions,
        logp_old=batch.log_probs,
        adv=batch.advantages,
        returns=batch.returns,
    )
    return feed


def ppo_loss(batch: TrajectoryBatch, policy: PolicyNet, value: ValueNet, config: PpoConfig) -> dict:
    """Loss and its components at the given networks' parameters."""
    pg = ppo_graph(policy, value, config)
    params = policy.params.merged(value.params)
    vals = pg.graph.run([pg.loss, pg.policy_loss, pg.value_loss, pg.entropy, pg.approx_kl], _feed(batch, params))
    return dict(zip(("loss", "policy_loss", "value_loss", "entropy", "approx_kl"), (float(x) for x in vals)))


class Adam:
    """Bias-corrected Adam over one flat parameter array."""

    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.step_count = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.step_count += 1
        out = np.array(params, dtype=np.float64)
        kernels.adam_step(out, np.ascontiguousarray(grad), self.m, self.v, self.lr, self.beta1, self.beta2, self.eps, self.step_count)
        return out


@dataclass
class FineTuneResult:
    policy: PolicyNet
    value: ValueNet
    epochs: List[dict] = field(default_factory=list)
    aborted: bool = False
    updates: int = 0


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> Tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(grad))
    if norm > max_norm:
        return grad * (max_norm / (norm + 1e-12)), norm
    return grad, norm


def fine_tune(
    policy: PolicyNet,
    value: ValueNet,
    batch: TrajectoryBatch,
    config: PpoConfig,
    rng: np.random.Generator,
    optimizer: Optional[Adam] = None,
) -> FineTuneResult:
    """``epochs`` passes of shuffled minibatch Adam steps on the PPO loss.

    Ratios are always taken against the log-probs stored in ``batch``.  On a
    non-finite loss the pass stops and the last finite networks are returned
    with ``aborted`` set.
    """
    pg = ppo_graph(policy, value, config)
    params = policy.params.merged(value.params)
    names = list(params.names)
    wrt = [pg.graph.var(pg.graph.leaves[n]) for n in names]
    grads = pg.graph.grad(pg.loss, wrt)
    targets = [pg.loss, pg.policy_loss, pg.value_loss, pg.entropy, pg.approx_kl] + grads
    if optimizer is None:
        optimizer = Adam(params.size, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps)

    n = len(batch)
    result = FineTuneResult(policy, value)
    pi_names = policy.params.names
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        sums = np.zeros(5)
        count = 0
        for start in range(0, n, config.minibatch_size):
            mb = batch.take(perm[start : start + config.minibatch_size])
            vals = pg.graph.run(targets, _feed(mb, params))
            head = np.array([float(x) for x in vals[:5]])
            if not np.all(np.isfinite(head)):
                result.aborted = True
                break
            flat_grad = np.concatenate([np.asarray(x).reshape(-1) for x in vals[5:]])
            if not np.all(np.isfinite(flat_grad)):
                result.aborted = True
                break
            flat_grad, _ = clip_grad_norm(flat_grad, config.max_grad_norm)
            params = clamp_log_std(params.with_values(optimizer.step(params.values, flat_grad)))
            sums += head
            count += 1
            result.updates += 1
        if count:
            means = sums / count
            result.epochs.append(
                {
                    "epoch": epoch,
                    "loss": means[0],
                    "policy_loss": means[1],
                    "value_loss": means[2],
                    "entropy": means[3],
                    "approx_kl": means[4],
                }
            )
        if result.aborted:
            break

    result.policy = policy.with_params(params.subset(pi_names))
    result.value = value.with_params(params.subset(value.params.names))
    return result
