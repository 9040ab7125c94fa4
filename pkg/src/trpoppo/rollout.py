"""On-policy rollout collection, GAE advantages and returns."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Union

import numpy as np

from trpoppo import kernels
from trpoppo.networks import PolicyNet, ValueNet, log_prob, policy_forward, value_forward

BATCH_SCHEMA = "trpoppo.batch/1"


class RolloutError(RuntimeError):
    pass


@dataclass(frozen=True)
class Transition:
    obs: np.ndarray
    action: np.ndarray
    reward: float
    done: bool
    log_prob_old: float
    value_old: float


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """T transitions stored column-wise.

    ``last_value`` bootstraps the step after the final transition when that
    transition did not end an episode.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    log_probs: np.ndarray
    values: Optional[np.ndarray]
    last_value: float = 0.0
    advantages: Optional[np.ndarray] = None
    returns: Optional[np.ndarray] = None
    episode_returns: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return int(self.rewards.shape[0])

    def transitions(self) -> Iterator[Transition]:
        for t in range(len(self)):
            yield Transition(
                self.obs[t],
                self.actions[t],
                float(self.rewards[t]),
                bool(self.dones[t]),
                float(self.log_probs[t]),
                float(self.values[t]) if self.values is not None else float("nan"),
            )

    def take(self, idx: np.ndarray) -> "TrajectoryBatch":
        def pick(a):
            return None if a is None else a[idx]

        return TrajectoryBatch(
            self.obs[idx],
            self.actions[idx],
            self.rewards[idx],
            self.dones[idx],
            self.log_probs[idx],
            pick(self.values),
            self.last_value,
            pick(self.advantages),
            pick(self.returns),
            self.episode_returns,
        )

    def replace(self, **changes) -> "TrajectoryBatch":
        return dataclasses.replace(self, **changes)


def _as_rng(seed: Union[int, np.random.Generator, None]) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def collect_rollout(
    env,
    policy: PolicyNet,
    value: ValueNet,
    horizon: int,
    seed: Union[int, np.random.Generator, None] = None,
) -> TrajectoryBatch:
    """Run ``policy`` for exactly ``horizon`` steps, resetting on episode end.

    The environment is reset at the start of every call.  Actions are drawn
    from the policy distribution with the given seed or generator.
    """
    if horizon < 1:
        raise ValueError("horizon must be >= 1")
    rng = _as_rng(seed)
    obs_buf = np.zeros((horizon, policy.obs_dim))
    act_buf = np.zeros((horizon, policy.act_dim))
    rew_buf = np.zeros(horizon)
    done_buf = np.zeros(horizon)
    logp_buf = np.zeros(horizon)
    val_buf = np.zeros(horizon)
    episode_returns = []
    running = 0.0

    t = 0
    try:
        obs = env.reset()
        for t in range(horizon):
            dist = policy_forward(policy, obs)
            action = dist.sample(rng)
            obs_buf[t] = obs
            act_buf[t] = action
            logp_buf[t] = log_prob(dist, action)
            val_buf[t] = value_forward(value, obs)
            obs, reward, done = env.step(action)
            rew_buf[t] = reward
            done_buf[t] = float(done)
            running += reward
            if done:
                episode_returns.append(running)
                running = 0.0
                if t + 1 < horizon:
                    obs = env.reset()
        last_value = 0.0 if done_buf[-1] else value_forward(value, obs)
    except Exception as exc:
        raise RolloutError(f"environment failed at step {t}: {exc}") from exc

    return TrajectoryBatch(
        obs_buf,
        act_buf,
        rew_buf,
        done_buf,
        logp_buf,
        val_buf,
        float(last_value),
        episode_returns=np.asarray(episode_returns, dtype=np.float64),
    )


def compute_gae(batch: TrajectoryBatch, gamma: float = 0.99, lam: float = 0.95) -> TrajectoryBatch:
    """Fill advantages and returns (returns = advantages + values)."""
    if batch.values is None:
        raise ValueError("batch has no value estimates")
    if not (0.0 <= gamma <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError(f"gamma and lam must lie in [0, 1], got {gamma}, {lam}")
    adv = kernels.gae(batch.rewards, batch.values, batch.dones, batch.last_value, gamma, lam)
    return batch.replace(advantages=adv, returns=adv + batch.values)


def normalize_advantages(batch: TrajectoryBatch) -> TrajectoryBatch:
    if batch.advantages is None:
        raise ValueError("advantages have not been computed")
    adv = batch.advantages
    if adv.size < 2:
        return batch
    std = adv.std()
    if std < 1e-8:
        return batch
    return batch.replace(advantages=(adv - adv.mean()) / std)


def save_batch(path: Union[str, Path], batch: TrajectoryBatch) -> None:
    """Columnar dump (.npz). Keys: schema, obs, actions, rewards, dones,
    log_probs, values, last_value, advantages, returns (NaN-filled if absent)."""
    n = len(batch)
    nan = np.full(n, np.nan)
    np.savez(
        path,
        schema=np.array(BATCH_SCHEMA),
        obs=batch.obs,
        actions=batch.actions,
        rewards=batch.rewards,
        dones=batch.dones,
        log_probs=batch.log_probs,
        values=batch.values if batch.values is not None else nan,
        last_value=np.array(batch.last_value),
        advantages=batch.advantages if batch.advantages is not None else nan,
        returns=batch.returns if batch.returns is not None else nan,
    )


def load_batch(path: Union[str, Path]) -> TrajectoryBatch:
    with np.load(path) as data:
        schema = str(data["schema"])
        if schema != BATCH_SCHEMA:
            raise ValueError(f"{path}: unsupported batch schema {schema!r}")
        adv = data["advantages"]
        ret = data["returns"]
        return TrajectoryBatch(
            data["obs"],
            data["actions"],
            data["rewards"],
            data["dones"],
            data["log_probs"],
            data["values"],
            float(data["last_value"]),
            None if np.all(np.isnan(adv)) else adv,
            None if np.all(np.isnan(ret)) else ret,
        )
