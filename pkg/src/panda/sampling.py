"""Trajectory sampling and score-function gradient estimators.

Sampling is organized around counter-based RNG: every trajectory gets its own
Philox stream derived from (seed, purpose, outer, inner, trajectory index),
so a trajectory's contents depend only on those coordinates and never on how
many draws other trajectories consumed.  Rollouts record (s, a, b, r) per
step and stop once the next state is absorbing, so absorbing states are
visited at most once (only when the initial draw lands on one, in which case
a single zero-reward step is recorded).

The estimators are the plain REINFORCE forms for the entropy-regularized
value: the policy gradients weight each step's score by the regularized
reward-to-go (environment reward plus tau-weighted log-probabilities of the
executed actions), and the reward-parameter gradient accumulates discounted
derivative mass on the visited (s, a, b) triples.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .game import MarkovGame, RewardModel, TabularPolicy, effective_reward, effective_reward_grad_x

__all__ = [
    "RngStream",
    "Trajectory",
    "GradEstimate",
    "rollout",
    "sample_batch",
    "estimate_grad_x",
    "estimate_grad_policy",
    "estimate_gradients",
    "q_hat",
    "n_env_steps",
]

_KEY_SALT = 0x9E3779B97F4A7C15  # second Philox key word, fixed arbitrary constant


@dataclass(frozen=True)
class RngStream:
    """Factory for per-trajectory Philox generators.

    `generator(purpose, outer, inner, traj)` places the four coordinates in
    the upper Philox counter words (word 0 stays free for block advancement),
    so distinct coordinates can never overlap streams.
    """

    seed: int

    def generator(self, purpose: int = 0, outer: int = 0, inner: int = 0,
                  traj: int = 0) -> np.random.Generator:
        key = [self.seed & 0xFFFFFFFFFFFFFFFF, _KEY_SALT]
        counter = [0, traj, inner, (purpose << 48) | outer]
        return np.random.Generator(np.random.Philox(counter=counter, key=key))


@dataclass
class Trajectory:
    states: np.ndarray
    actions_min: np.ndarray
    actions_max: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return len(self.states)


def _cumulative(game: MarkovGame):
    cache = game._cum_cache
    if "p" not in cache:
        cache["p"] = np.cumsum(game.transition, axis=-1)
        cache["rho"] = np.cumsum(game.init_dist)
    return cache["p"], cache["rho"]


def _pick(cum_row: np.ndarray, u: float) -> int:
    return min(int(np.searchsorted(cum_row, u, side="right")), len(cum_row) - 1)


def rollout(game: MarkovGame, model: RewardModel, policy_min, policy_max,
            horizon: int, rng: np.random.Generator) -> Trajectory:
    """Sample one trajectory of at most `horizon` recorded steps."""
    y = policy_min.probs_all() if isinstance(policy_min, TabularPolicy) else np.asarray(policy_min)
    z = policy_max.probs_all() if isinstance(policy_max, TabularPolicy) else np.asarray(policy_max)
    r_eff = effective_reward(game, model)
    return _rollout_prepared(game, r_eff, np.cumsum(y, axis=1), np.cumsum(z, axis=1),
                             horizon, rng)


def _rollout_prepared(game, r_eff, cum_y, cum_z, horizon, rng) -> Trajectory:
    cum_p, cum_rho = _cumulative(game)
    us = rng.random(1 + 3 * horizon)
    s = _pick(cum_rho, us[0])
    states, amin, amax, rewards = [], [], [], []
    k = 1
    for _ in range(horizon):
        a = _pick(cum_y[s], us[k])
        b = _pick(cum_z[s], us[k + 1])
        states.append(s)
        amin.append(a)
        amax.append(b)
        rewards.append(r_eff[s, a, b])
        s = _pick(cum_p[s, a, b], us[k + 2])
        k += 3
        if game.absorbing[s]:
            break
    return Trajectory(np.array(states, dtype=np.intp), np.array(amin, dtype=np.intp),
                      np.array(amax, dtype=np.intp), np.array(rewards, dtype=float))


def sample_batch(game: MarkovGame, model: RewardModel, policy_min, policy_max,
                 batch: int, horizon: int, stream: RngStream, purpose: int = 0,
                 outer: int = 0, inner: int = 0) -> list[Trajectory]:
    """Sample `batch` independent trajectories on dedicated per-index streams."""
    y = policy_min.probs_all() if isinstance(policy_min, TabularPolicy) else np.asarray(policy_min)
    z = policy_max.probs_all() if isinstance(policy_max, TabularPolicy) else np.asarray(policy_max)
    r_eff = effective_reward(game, model)
    cum_y = np.cumsum(y, axis=1)
    cum_z = np.cumsum(z, axis=1)
    return [
        _rollout_prepared(game, r_eff, cum_y, cum_z, horizon,
                          stream.generator(purpose, outer, inner, i))
        for i in range(batch)
    ]


def n_env_steps(trajs) -> int:
    return int(sum(len(t) for t in trajs))


def _reg_rewards(game: MarkovGame, lp_y, lp_z, traj: Trajectory) -> np.ndarray:
    """Per-step regularized reward r + tau_min*log y - tau_max*log z, masked."""
    u = (traj.rewards
         + game.tau_min * lp_y[traj.states, traj.actions_min]
         - game.tau_max * lp_z[traj.states, traj.actions_max])
    u[game.absorbing[traj.states]] = 0.0
    return u


def _reward_to_go(u: np.ndarray, gamma: float) -> np.ndarray:
    g = np.empty_like(u)
    acc = 0.0
    for t in range(len(u) - 1, -1, -1):
        acc = u[t] + gamma * acc
        g[t] = acc
    return g


def _log_probs(policy) -> np.ndarray:
    if isinstance(policy, TabularPolicy):
        return policy.log_probs_all()
    return np.log(np.maximum(np.asarray(policy, dtype=float), 1e-320))


def q_hat(game: MarkovGame, policy_min, policy_max, traj: Trajectory, t: int) -> float:
    """Regularized reward-to-go of a trajectory from step t."""
    if not 0 <= t < len(traj):
        raise IndexError(f"step {t} out of range for trajectory of length {len(traj)}")
    u = _reg_rewards(game, _log_probs(policy_min), _log_probs(policy_max), traj)
    return float(_reward_to_go(u, game.discount)[t])


def estimate_grad_policy(game: MarkovGame, policy_min: TabularPolicy,
                         policy_max: TabularPolicy, trajs, side: str) -> np.ndarray:
    """Batch-mean REINFORCE gradient of J in one player's logits."""
    lp_y = policy_min.log_probs_all()
    lp_z = policy_max.log_probs_all()
    if side == "min":
        probs = np.exp(lp_y)
    elif side == "max":
        probs = np.exp(lp_z)
    else:
        raise ValueError(f"side must be 'min' or 'max', got {side!r}")
    grad = np.zeros_like(probs)
    for traj in trajs:
        u = _reg_rewards(game, lp_y, lp_z, traj)
        g = _reward_to_go(u, game.discount)
        w = g * game.discount ** np.arange(len(traj))
        acts = traj.actions_min if side == "min" else traj.actions_max
        np.add.at(grad, (traj.states, acts), w)
        np.add.at(grad, traj.states, -w[:, None] * probs[traj.states])
    return grad / len(trajs)


def estimate_grad_x(game: MarkovGame, model: RewardModel, trajs) -> np.ndarray:
    """Batch-mean gradient of J in the incentive parameters."""
    gx = effective_reward_grad_x(game, model)
    grad = np.zeros_like(gx)
    for traj in trajs:
        w = gx[traj.states, traj.actions_min, traj.actions_max] \
            * game.discount ** np.arange(len(traj))
        np.add.at(grad, (traj.states, traj.actions_min, traj.actions_max), w)
    return grad / len(trajs)


@dataclass
class GradEstimate:
    grad_x: np.ndarray | None
    grad_min: np.ndarray | None
    grad_max: np.ndarray | None
    n_env_steps: int


def estimate_gradients(game: MarkovGame, model: RewardModel, policy_min: TabularPolicy,
                       policy_max: TabularPolicy, trajs,
                       want=("x", "min", "max")) -> GradEstimate:
    return GradEstimate(
        grad_x=estimate_grad_x(game, model, trajs) if "x" in want else None,
        grad_min=estimate_grad_policy(game, policy_min, policy_max, trajs, "min") if "min" in want else None,
        grad_max=estimate_grad_policy(game, policy_min, policy_max, trajs, "max") if "max" in want else None,
        n_env_steps=n_env_steps(trajs),
    )
