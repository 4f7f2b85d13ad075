"""Desk-scale experiment environments.

Two instances are provided, both bilevel problems whose lower level is an
entropy-regularized zero-sum Markov game and whose upper level is minimized:

* synthetic: a dense random game on a handful of states.  The designer's
  objective is the negated expected discounted return of a separate random
  "designer MDP" evaluated over a short horizon under the two equilibrium
  policies; the incentive x shifts the game's payoff through a bounded
  sigmoid term.

* sentinel: a 5x5 pursuit grid.  A sentinel (maximizer) tries to capture an
  intruder (minimizer) before it reaches a target cell; capture pays +10 to
  the game value and target arrival pays -10.  The positions are tabularized
  into (sentinel cell, intruder cell) pairs plus one terminal state.  The
  designer adds a small incentive (scale 0.05) to the stage payoff and wants
  the sentinel to stay out of a band of restricted cells, so the upper-level
  loss is the expected number of steps the sentinel spends there during a
  truncated episode.

In both cases the upper-level objective has no direct dependence on x (only
through the equilibrium policies), so its partial x-gradient is identically
zero; the estimator interfaces still expose it for uniformity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .game import MarkovGame, RewardModel, TabularPolicy
from .sampling import RngStream, n_env_steps, sample_batch

__all__ = [
    "SyntheticSpec",
    "GridSpec",
    "EnvBundle",
    "SyntheticUL",
    "SentinelUL",
    "build_synthetic",
    "build_sentinel",
    "build_env",
    "ul_value_exact",
]


# --------------------------------------------------------------------------
# Shared finite-horizon policy-gradient helpers (plain, unregularized)
# --------------------------------------------------------------------------

def _pg_from_trajs(trajs, probs, side, gamma):
    """Mean REINFORCE gradient sum_t gamma^t score_t * reward-to-go_t."""
    grad = np.zeros_like(probs)
    for traj in trajs:
        g = np.empty(len(traj))
        acc = 0.0
        for t in range(len(traj) - 1, -1, -1):
            acc = traj.rewards[t] + gamma * acc
            g[t] = acc
        w = g * gamma ** np.arange(len(traj))
        acts = traj.actions_min if side == "min" else traj.actions_max
        np.add.at(grad, (traj.states, acts), w)
        np.add.at(grad, traj.states, -w[:, None] * probs[traj.states])
    return grad / len(trajs)


def _probs_of(policy):
    if isinstance(policy, TabularPolicy):
        return policy.probs_all()
    return np.asarray(policy, dtype=float)


def _finite_horizon_pg_exact(transition, rewards, rho, y, z, horizon, gamma):
    """Exact finite-horizon policy gradients of E[sum_t gamma^t r_t].

    Returns (value, grad_min, grad_max) for stationary policies (y, z) acting
    jointly in the MDP given by `transition` (S,A,B,S) and `rewards` (S,A,B).
    """
    p_yz = np.einsum("sabn,sa,sb->sn", transition, y, z)
    # backward action values; v[t] is the tail value from step t
    v_next = np.zeros(transition.shape[0])
    qs = []
    for _ in range(horizon):
        q = rewards + gamma * np.einsum("sabn,n->sab", transition, v_next)
        v_next = np.einsum("sab,sa,sb->s", q, y, z)
        qs.append(q)
    qs.reverse()  # qs[t] holds the step-t action values
    value = float(rho @ v_next)

    gmin = np.zeros_like(y)
    gmax = np.zeros_like(z)
    pt = rho.copy()
    for t in range(horizon):
        q = qs[t]
        sc = (gamma ** t) * pt
        qy = np.einsum("sab,sb->sa", q, z)
        gmin += sc[:, None] * y * (qy - np.sum(y * qy, axis=1, keepdims=True))
        qz = np.einsum("sab,sa->sb", q, y)
        gmax += sc[:, None] * z * (qz - np.sum(z * qz, axis=1, keepdims=True))
        pt = p_yz.T @ pt
    return value, gmin, gmax


# --------------------------------------------------------------------------
# Synthetic incentive-design instance
# --------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_states: int = 5
    n_actions: int = 3
    discount: float = 0.99
    tau: float = 0.1
    ul_horizon: int = 3
    incentive_scale: float = 1.0
    share_dynamics: bool = False  # reuse the game dynamics for the designer MDP
    seed: int = 0


@dataclass
class SyntheticUL:
    """Designer objective f = -E[short-horizon discounted return in the designer MDP].

    The designer MDP shares the players' action sets; both policies act in it
    jointly.  f is minimized, hence the negation of the collected return.
    """

    mdp: MarkovGame
    reward_id: RewardModel
    horizon: int

    def value_exact(self, model, policy_min, policy_max) -> float:
        y, z = _probs_of(policy_min), _probs_of(policy_max)
        value, _, _ = _finite_horizon_pg_exact(
            self.mdp.transition, self.reward_id.base, self.mdp.init_dist,
            y, z, self.horizon, self.mdp.discount)
        return -value

    def grad_policies_exact(self, model, policy_min, policy_max):
        y, z = _probs_of(policy_min), _probs_of(policy_max)
        _, gmin, gmax = _finite_horizon_pg_exact(
            self.mdp.transition, self.reward_id.base, self.mdp.init_dist,
            y, z, self.horizon, self.mdp.discount)
        return -gmin, -gmax

    def grad_x_exact(self, model, policy_min, policy_max) -> np.ndarray:
        return np.zeros_like(model.incentive_params)

    def _sample(self, policy_min, policy_max, batch, stream, purpose, outer, inner):
        return sample_batch(self.mdp, self.reward_id, policy_min, policy_max,
                            batch, self.horizon, stream, purpose, outer, inner)

    def value_estimate(self, model, policy_min, policy_max, batch,
                       stream: RngStream, purpose=0, outer=0, inner=0):
        trajs = self._sample(policy_min, policy_max, batch, stream, purpose, outer, inner)
        gamma = self.mdp.discount
        vals = [-(t.rewards * gamma ** np.arange(len(t))).sum() for t in trajs]
        return float(np.mean(vals)), n_env_steps(trajs)

    def grad_policies_estimate(self, model, policy_min, policy_max, batch,
                               stream: RngStream, purpose=0, outer=0, inner=0):
        trajs = self._sample(policy_min, policy_max, batch, stream, purpose, outer, inner)
        y, z = _probs_of(policy_min), _probs_of(policy_max)
        gmin = -_pg_from_trajs(trajs, y, "min", self.mdp.discount)
        gmax = -_pg_from_trajs(trajs, z, "max", self.mdp.discount)
        return gmin, gmax, n_env_steps(trajs)

    def grad_x_estimate(self, model, policy_min, policy_max, batch,
                        stream: RngStream, purpose=0, outer=0, inner=0):
        # f has no direct x-dependence; nothing to sample
        return np.zeros_like(model.incentive_params), 0


@dataclass
class EnvBundle:
    name: str
    game: MarkovGame
    model: RewardModel
    ul: object
    horizon: int  # trajectory truncation for lower-level estimators


def build_synthetic(spec: SyntheticSpec) -> EnvBundle:
    """Seeded dense random game plus a designer MDP on the same action sets.

    Draw order (stable across versions): game transitions, base payoff,
    designer transitions (skipped when shared), designer rewards.
    """
    rng = np.random.default_rng(spec.seed)
    s, a = spec.n_states, spec.n_actions
    p = rng.uniform(0.0, 1.0, size=(s, a, a, s))
    p /= p.sum(axis=3, keepdims=True)
    base = rng.uniform(0.0, 1.0, size=(s, a, a))
    if spec.share_dynamics:
        p_id = p
    else:
        p_id = rng.uniform(0.0, 1.0, size=(s, a, a, s))
        p_id /= p_id.sum(axis=3, keepdims=True)
    r_id = rng.uniform(0.0, 1.0, size=(s, a, a))

    rho = np.full(s, 1.0 / s)
    game = MarkovGame(transition=p, init_dist=rho, absorbing=np.zeros(s, bool),
                      discount=spec.discount, tau_min=spec.tau, tau_max=spec.tau)
    model = RewardModel(base=base, incentive_params=np.zeros((s, a, a)),
                        incentive_scale=spec.incentive_scale)
    mdp = MarkovGame(transition=p_id, init_dist=rho, absorbing=np.zeros(s, bool),
                     discount=spec.discount, tau_min=spec.tau, tau_max=spec.tau)
    reward_id = RewardModel(base=r_id, incentive_params=np.zeros((s, a, a)),
                            incentive_scale=0.0)
    ul = SyntheticUL(mdp=mdp, reward_id=reward_id, horizon=spec.ul_horizon)
    return EnvBundle(name="synthetic", game=game, model=model, ul=ul,
                     horizon=spec.ul_horizon)


# --------------------------------------------------------------------------
# Sentinel-intruder pursuit grid
# --------------------------------------------------------------------------

@dataclass
class GridSpec:
    width: int = 5
    height: int = 5
    sentinel_spawn: tuple = (0, 4)
    intruder_spawns: tuple = ((0, 0), (0, 1), (1, 0))
    target: tuple = (4, 4)
    restricted: tuple = ((1, 3), (1, 4), (2, 3), (2, 4), (3, 3), (3, 4))
    payoff: float = 10.0
    incentive_scale: float = 0.05
    max_steps: int = 20
    discount: float = 0.99
    tau: float = 0.1

    def cell(self, rc) -> int:
        return rc[0] * self.width + rc[1]

    def ascii_map(self) -> str:
        rows = []
        for r in range(self.height):
            row = ""
            for c in range(self.width):
                if (r, c) == self.sentinel_spawn:
                    row += "S"
                elif (r, c) in self.intruder_spawns:
                    row += "I"
                elif (r, c) == self.target:
                    row += "T"
                elif (r, c) in self.restricted:
                    row += "#"
                else:
                    row += "."
            rows.append(row)
        return "\n".join(rows)


# action order shared by both players: up, down, left, right, stay
_MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))


@dataclass
class SentinelUL:
    """Designer loss: expected restricted-cell step count of the sentinel.

    Counts every non-terminal step of a truncated episode whose state has the
    sentinel inside the restricted band (repeat visits count again).  The
    count depends on x only through the policies, so the direct x-gradient
    is zero.
    """

    game: MarkovGame
    restricted_state: np.ndarray  # bool (S,), terminal excluded
    horizon: int

    def value_exact(self, model, policy_min, policy_max) -> float:
        y, z = _probs_of(policy_min), _probs_of(policy_max)
        p_yz = np.einsum("sabn,sa,sb->sn", self.game.transition, y, z)
        c = self.restricted_state.astype(float)
        v = np.zeros(self.game.n_states)
        for _ in range(self.horizon):
            v = c + p_yz @ v
            v[self.game.absorbing] = 0.0
        # the recursion already zeroes the terminal; including absorbing visits
        # would double-count steps the rollout never records
        return float(self.game.init_dist @ v)

    def grad_policies_exact(self, model, policy_min, policy_max):
        y, z = _probs_of(policy_min), _probs_of(policy_max)
        p = self.game.transition
        p_yz = np.einsum("sabn,sa,sb->sn", p, y, z)
        c = self.restricted_state.astype(float)
        # tail[t](s) = expected remaining count from step t in state s
        tails = [np.zeros(self.game.n_states)]
        for _ in range(self.horizon):
            v = c + p_yz @ tails[-1]
            v[self.game.absorbing] = 0.0
            tails.append(v)
        tails.reverse()  # tails[t] now pairs with step t

        gmin = np.zeros_like(y)
        gmax = np.zeros_like(z)
        pt = self.game.init_dist.copy()
        for t in range(self.horizon):
            # action value: counts strictly after step t (the step-t count does
            # not depend on the current actions)
            q = np.einsum("sabn,n->sab", p, tails[t + 1])
            q[self.game.absorbing] = 0.0
            qy = np.einsum("sab,sb->sa", q, z)
            gmin += pt[:, None] * y * (qy - np.sum(y * qy, axis=1, keepdims=True))
            qz = np.einsum("sab,sa->sb", q, y)
            gmax += pt[:, None] * z * (qz - np.sum(z * qz, axis=1, keepdims=True))
            pt = p_yz.T @ pt
        return gmin, gmax

    def grad_x_exact(self, model, policy_min, policy_max) -> np.ndarray:
        return np.zeros_like(model.incentive_params)

    def _counts(self, traj):
        return self.restricted_state[traj.states].astype(float)

    def value_estimate(self, model, policy_min, policy_max, batch,
                       stream: RngStream, purpose=0, outer=0, inner=0):
        trajs = sample_batch(self.game, model, policy_min, policy_max, batch,
                             self.horizon, stream, purpose, outer, inner)
        vals = [self._counts(t).sum() for t in trajs]
        return float(np.mean(vals)), n_env_steps(trajs)

    def grad_policies_estimate(self, model, policy_min, policy_max, batch,
                               stream: RngStream, purpose=0, outer=0, inner=0):
        trajs = sample_batch(self.game, model, policy_min, policy_max, batch,
                             self.horizon, stream, purpose, outer, inner)
        y, z = _probs_of(policy_min), _probs_of(policy_max)
        gmin = np.zeros_like(y)
        gmax = np.zeros_like(z)
        for traj in trajs:
            ctg = np.cumsum(self._counts(traj)[::-1])[::-1]  # undiscounted count-to-go
            np.add.at(gmin, (traj.states, traj.actions_min), ctg)
            np.add.at(gmin, traj.states, -ctg[:, None] * y[traj.states])
            np.add.at(gmax, (traj.states, traj.actions_max), ctg)
            np.add.at(gmax, traj.states, -ctg[:, None] * z[traj.states])
        n = len(trajs)
        return gmin / n, gmax / n, n_env_steps(trajs)

    def grad_x_estimate(self, model, policy_min, policy_max, batch,
                        stream: RngStream, purpose=0, outer=0, inner=0):
        return np.zeros_like(model.incentive_params), 0


def build_sentinel(spec: GridSpec) -> EnvBundle:
    """Tabularize the pursuit grid into (sentinel, intruder) pairs + terminal.

    Simultaneous moves with wall clipping.  Post-move collisions capture
    (capture wins ties with target arrival); a state that already has both
    players on one cell captures immediately at the next step, and a state
    with the intruder on the target pays out immediately, both regardless of
    actions.
    """
    w, h = spec.width, spec.height
    n_cells = w * h
    n_states = n_cells * n_cells + 1
    terminal = n_states - 1
    target = spec.cell(spec.target)
    n_act = len(_MOVES)

    def clip_move(cell, mv):
        r, c = divmod(cell, w)
        r2 = min(max(r + _MOVES[mv][0], 0), h - 1)
        c2 = min(max(c + _MOVES[mv][1], 0), w - 1)
        return r2 * w + c2

    moved = np.empty((n_cells, n_act), dtype=np.intp)
    for cell in range(n_cells):
        for mv in range(n_act):
            moved[cell, mv] = clip_move(cell, mv)

    transition = np.zeros((n_states, n_act, n_act, n_states))
    base = np.zeros((n_states, n_act, n_act))
    for sent in range(n_cells):
        for intr in range(n_cells):
            s = sent * n_cells + intr
            if sent == intr:
                transition[s, :, :, terminal] = 1.0
                base[s] = spec.payoff
                continue
            if intr == target:
                transition[s, :, :, terminal] = 1.0
                base[s] = -spec.payoff
                continue
            for a in range(n_act):      # intruder (min player)
                intr2 = moved[intr, a]
                for b in range(n_act):  # sentinel (max player)
                    sent2 = moved[sent, b]
                    if sent2 == intr2:
                        transition[s, a, b, terminal] = 1.0
                        base[s, a, b] = spec.payoff
                    elif intr2 == target:
                        transition[s, a, b, terminal] = 1.0
                        base[s, a, b] = -spec.payoff
                    else:
                        transition[s, a, b, sent2 * n_cells + intr2] = 1.0
    transition[terminal, :, :, terminal] = 1.0

    rho = np.zeros(n_states)
    sent0 = spec.cell(spec.sentinel_spawn)
    for rc in spec.intruder_spawns:
        rho[sent0 * n_cells + spec.cell(rc)] = 1.0 / len(spec.intruder_spawns)

    absorbing = np.zeros(n_states, dtype=bool)
    absorbing[terminal] = True
    game = MarkovGame(transition=transition, init_dist=rho, absorbing=absorbing,
                      discount=spec.discount, tau_min=spec.tau, tau_max=spec.tau)
    model = RewardModel(base=base, incentive_params=np.zeros((n_states, n_act, n_act)),
                        incentive_scale=spec.incentive_scale)

    restricted_cells = {spec.cell(rc) for rc in spec.restricted}
    restricted_state = np.zeros(n_states, dtype=bool)
    for sent in range(n_cells):
        if sent in restricted_cells:
            restricted_state[sent * n_cells:(sent + 1) * n_cells] = True
    restricted_state[terminal] = False

    ul = SentinelUL(game=game, restricted_state=restricted_state, horizon=spec.max_steps)
    return EnvBundle(name="sentinel", game=game, model=model, ul=ul,
                     horizon=spec.max_steps)


def build_env(name: str, **overrides) -> EnvBundle:
    if name == "synthetic":
        return build_synthetic(SyntheticSpec(**overrides))
    if name == "sentinel":
        return build_sentinel(GridSpec(**overrides))
    raise ValueError(f"unknown environment {name!r}")


def ul_value_exact(env: EnvBundle, model, policy_min, policy_max) -> float:
    """Exact upper-level loss of an environment at the given point."""
    return env.ul.value_exact(model, policy_min, policy_max)
