"""Property-check suites shared by the CLI and the acceptance tests.

Each suite returns a list of `CheckResult`s.  A result's `residual` is the
worst observed violation statistic for that property across all seeded
instances; the property holds when `residual <= tol`.  Randomness is fully
seeded so the suites are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exact import (
    bellman_policy_operator,
    best_response,
    exact_grad_policy,
    exact_grad_policy_truncated,
    exact_grad_x,
    exact_grad_x_truncated,
    j_value,
    ni_gradients,
    pl_constant,
    policy_eval,
    soft_bellman_optimality,
    solve_ne,
)
from .game import MarkovGame, RewardModel, TabularPolicy
from .sampling import RngStream, estimate_gradients, sample_batch


@dataclass
class CheckResult:
    name: str
    residual: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.residual <= self.tol


def _random_instance(rng: np.random.Generator, n_states, na, nb, gamma,
                     tau_min=0.1, tau_max=0.1, scale=1.0):
    p = rng.uniform(0.05, 1.0, size=(n_states, na, nb, n_states))
    p /= p.sum(axis=-1, keepdims=True)
    rho = rng.uniform(0.2, 1.0, size=n_states)
    rho /= rho.sum()
    game = MarkovGame(p, rho, np.zeros(n_states, dtype=bool), gamma,
                      tau_min, tau_max)
    model = RewardModel(rng.uniform(0.0, 1.0, size=(n_states, na, nb)),
                        rng.normal(size=(n_states, na, nb)), scale)
    return game, model


def _random_pols(rng, n_states, na, nb, spread=1.0):
    return (TabularPolicy(spread * rng.normal(size=(n_states, na))),
            TabularPolicy(spread * rng.normal(size=(n_states, nb))))


# --------------------------------------------------------------------------
# Operator suite
# --------------------------------------------------------------------------

def operator_suite(n_instances: int = 50, seed: int = 0) -> list[CheckResult]:
    """Contraction, monotonicity, and constant-shift identities of both
    Bellman operators on seeded (game, value-vector) instances."""
    rng = np.random.default_rng(seed)
    worst = {k: 0.0 for k in
             ("policy-contraction", "policy-monotonicity", "policy-shift",
              "optimality-contraction", "optimality-monotonicity",
              "optimality-shift")}
    for _ in range(n_instances):
        n, na, nb = rng.integers(2, 6), rng.integers(2, 4), rng.integers(2, 4)
        gamma = rng.uniform(0.5, 0.99)
        game, model = _random_instance(rng, n, na, nb, gamma)
        pmin, pmax = _random_pols(rng, n, na, nb)
        v1 = rng.normal(scale=3.0, size=n)
        v2 = rng.normal(scale=3.0, size=n)
        c = float(rng.uniform(0.5, 4.0))

        tp1 = bellman_policy_operator(game, model, pmin, pmax, v1)
        tp2 = bellman_policy_operator(game, model, pmin, pmax, v2)
        to1, _, _ = soft_bellman_optimality(game, model, v1)
        to2, _, _ = soft_bellman_optimality(game, model, v2)
        dv = np.abs(v1 - v2).max()

        worst["policy-contraction"] = max(
            worst["policy-contraction"], np.abs(tp1 - tp2).max() - gamma * dv)
        worst["optimality-contraction"] = max(
            worst["optimality-contraction"], np.abs(to1 - to2).max() - gamma * dv)

        hi = np.maximum(v1, v2)
        tph = bellman_policy_operator(game, model, pmin, pmax, hi)
        toh, _, _ = soft_bellman_optimality(game, model, hi)
        worst["policy-monotonicity"] = max(
            worst["policy-monotonicity"], float((tp1 - tph).max()))
        worst["optimality-monotonicity"] = max(
            worst["optimality-monotonicity"], float((to1 - toh).max()))

        tpc = bellman_policy_operator(game, model, pmin, pmax, v1 + c)
        toc, _, _ = soft_bellman_optimality(game, model, v1 + c)
        worst["policy-shift"] = max(
            worst["policy-shift"], np.abs(tpc - (tp1 + gamma * c)).max())
        worst["optimality-shift"] = max(
            worst["optimality-shift"], np.abs(toc - (to1 + gamma * c)).max())
    return [CheckResult(k, float(v), 1e-10) for k, v in worst.items()]


# --------------------------------------------------------------------------
# Equilibrium suite
# --------------------------------------------------------------------------

def equilibrium_suite(n_games: int = 20, seed: int = 0) -> list[CheckResult]:
    """solve_ne on seeded games: residual scale, gap at the NE, saddle
    inequalities against random deviations, and minmax = maxmin."""
    rng = np.random.default_rng(seed + 1)
    worst_res = worst_gap = worst_saddle = worst_mm = 0.0
    for _ in range(n_games):
        n, k = int(rng.integers(2, 6)), int(rng.integers(2, 4))
        gamma = float(rng.uniform(0.6, 0.97))
        game, model = _random_instance(rng, n, k, k, gamma,
                                       tau_min=float(rng.uniform(0.05, 0.3)),
                                       tau_max=float(rng.uniform(0.05, 0.3)))
        ne = solve_ne(game, model, tol=1e-9)
        worst_res = max(worst_res,
                        ne.residual / (1e-9 * (1 - gamma) / gamma))

        bmax = best_response(game, model, ne.policy_min, "max", tol=1e-10)
        bmin = best_response(game, model, ne.policy_max, "min", tol=1e-10)
        worst_gap = max(worst_gap, bmax.j_value - bmin.j_value)
        worst_mm = max(worst_mm, abs(bmax.j_value - bmin.j_value))

        v_ne = j_value(game, model, ne.policy_min, ne.policy_max)
        for _ in range(100):
            dev_min, dev_max = _random_pols(rng, n, k, k, spread=2.0)
            # J(y*, z') <= J(y*, z*) <= J(y', z*) up to slack
            lo = j_value(game, model, ne.policy_min, dev_max)
            hi = j_value(game, model, dev_min, ne.policy_max)
            worst_saddle = max(worst_saddle, lo - v_ne, v_ne - hi)
    return [
        CheckResult("ne-bellman-residual-scaled", float(worst_res), 1.0),
        CheckResult("ni-gap-at-ne", float(worst_gap), 1e-6),
        CheckResult("saddle-inequality-slack", float(worst_saddle), 1e-8),
        CheckResult("minmax-equals-maxmin", float(worst_mm), 2e-9),
    ]


# --------------------------------------------------------------------------
# Gradient suite
# --------------------------------------------------------------------------

def _j_at(game, model, logits_min, logits_max):
    return j_value(game, model, TabularPolicy(logits_min), TabularPolicy(logits_max))


def gradient_suite(n_points: int = 20, seed: int = 0,
                   eps: float = 1e-6) -> list[CheckResult]:
    """Exact policy/incentive gradients of J against central differences."""
    rng = np.random.default_rng(seed + 2)
    worst = {"grad-min-fd": 0.0, "grad-max-fd": 0.0, "grad-x-fd": 0.0}
    for _ in range(n_points):
        n, na, nb = int(rng.integers(2, 6)), int(rng.integers(2, 4)), int(rng.integers(2, 4))
        gamma = float(rng.uniform(0.5, 0.97))
        game, model = _random_instance(rng, n, na, nb, gamma)
        pmin, pmax = _random_pols(rng, n, na, nb)
        gmin = exact_grad_policy(game, model, pmin, pmax, "min")
        gmax = exact_grad_policy(game, model, pmin, pmax, "max")
        gx = exact_grad_x(game, model, pmin, pmax)
        coords = [(int(rng.integers(n)), int(rng.integers(na))) for _ in range(4)]
        for (i, j) in coords:
            lp = pmin.logits.copy(); lp[i, j] += eps
            up = _j_at(game, model, lp, pmax.logits)
            lp[i, j] -= 2 * eps
            dn = _j_at(game, model, lp, pmax.logits)
            fd = (up - dn) / (2 * eps)
            worst["grad-min-fd"] = max(
                worst["grad-min-fd"], abs(fd - gmin[i, j]) / (1.0 + abs(fd)))
        coords = [(int(rng.integers(n)), int(rng.integers(nb))) for _ in range(4)]
        for (i, j) in coords:
            lp = pmax.logits.copy(); lp[i, j] += eps
            up = _j_at(game, model, pmin.logits, lp)
            lp[i, j] -= 2 * eps
            dn = _j_at(game, model, pmin.logits, lp)
            fd = (up - dn) / (2 * eps)
            worst["grad-max-fd"] = max(
                worst["grad-max-fd"], abs(fd - gmax[i, j]) / (1.0 + abs(fd)))
        for _ in range(4):
            i, a, b = (int(rng.integers(n)), int(rng.integers(na)),
                       int(rng.integers(nb)))
            xp = model.incentive_params.copy(); xp[i, a, b] += eps
            up = j_value(game, model.with_params(xp), pmin, pmax)
            xp[i, a, b] -= 2 * eps
            dn = j_value(game, model.with_params(xp), pmin, pmax)
            fd = (up - dn) / (2 * eps)
            worst["grad-x-fd"] = max(
                worst["grad-x-fd"], abs(fd - gx[i, a, b]) / (1.0 + abs(fd)))
    return [CheckResult(k, float(v), 1e-5) for k, v in worst.items()]


# --------------------------------------------------------------------------
# Estimator suite
# --------------------------------------------------------------------------

def estimator_suite(seed: int = 0, n_mean_samples: int = 100_000,
                    n_var_reps: int = 10_000) -> list[CheckResult]:
    """Sampling-based gradient estimators: unbiasedness against truncated
    exact gradients (z-scores), 1/B variance scaling, and the horizon-
    truncation bias decay rate."""
    rng = np.random.default_rng(seed + 3)
    game, model = _random_instance(rng, 3, 2, 2, gamma=0.9)
    pmin, pmax = _random_pols(rng, 3, 2, 2, spread=0.5)
    horizon = 20
    stream = RngStream(seed + 101)

    # (a) unbiasedness: batch means over >= n_mean_samples trajectories
    batch = 50
    reps = (n_mean_samples + batch - 1) // batch
    sums = {}
    sq_sums = {}
    for rep in range(reps):
        trajs = sample_batch(game, model, pmin, pmax, batch, horizon, stream,
                             purpose=0, outer=rep)
        est = estimate_gradients(game, model, pmin, pmax, trajs)
        for key, val in (("min", est.grad_min), ("max", est.grad_max),
                         ("x", est.grad_x)):
            flat = val.ravel()
            sums[key] = sums.get(key, 0.0) + flat
            sq_sums[key] = sq_sums.get(key, 0.0) + flat * flat
    exact = {
        "min": exact_grad_policy_truncated(game, model, pmin, pmax, horizon, "min"),
        "max": exact_grad_policy_truncated(game, model, pmin, pmax, horizon, "max"),
        "x": exact_grad_x_truncated(game, model, pmin, pmax, horizon),
    }
    worst_z = 0.0
    for key in ("min", "max", "x"):
        mean = sums[key] / reps
        var = (sq_sums[key] / reps - mean * mean) * reps / (reps - 1)
        se = np.sqrt(np.maximum(var, 1e-30) / reps)
        z = np.abs(mean - exact[key].ravel()) / (se + 1e-12)
        worst_z = max(worst_z, float(z.max()))

    # (b) variance scaling: Var[batch mean] ~ 1/B on a fixed projection
    proj = rng.normal(size=pmin.logits.size)
    proj /= np.linalg.norm(proj)
    scaled = {}
    for b_idx, b in enumerate((4, 16, 64)):
        vals = np.empty(n_var_reps)
        for rep in range(n_var_reps):
            trajs = sample_batch(game, model, pmin, pmax, b, 10, stream,
                                 purpose=10 + b_idx, outer=rep)
            g = estimate_gradients(game, model, pmin, pmax, trajs,
                                   want=("min",)).grad_min
            vals[rep] = proj @ g.ravel()
        scaled[b] = b * vals.var(ddof=1)
    ratios = [scaled[4] / scaled[16], scaled[16] / scaled[64],
              scaled[4] / scaled[64]]
    worst_ratio = max(max(r, 1.0 / r) for r in ratios)

    # (c) truncation bias between H and H+10 decays like gamma^10
    h0 = 8
    full_min = exact_grad_policy(game, model, pmin, pmax, "min")
    full_x = exact_grad_x(game, model, pmin, pmax)
    bias = lambda h: (
        np.linalg.norm(exact_grad_policy_truncated(game, model, pmin, pmax,
                                                   h, "min") - full_min)
        + np.linalg.norm(exact_grad_x_truncated(game, model, pmin, pmax, h)
                         - full_x))
    decay = bias(h0 + 10) / bias(h0)
    target = game.discount ** 10
    worst_decay = max(decay / target, target / decay)

    return [
        CheckResult("estimator-unbiased-zmax", worst_z, 4.0),
        CheckResult("estimator-variance-1-over-b", float(worst_ratio), 1.25),
        CheckResult("truncation-bias-decay-factor", float(worst_decay), 3.0),
    ]


# --------------------------------------------------------------------------
# PL suite
# --------------------------------------------------------------------------

def pl_suite(n_points: int = 50, seed: int = 0) -> list[CheckResult]:
    """Non-uniform gradient-dominance inequalities at seeded points.

    For the gap: 0.5*||grad g||^2 >= mu * g - 1e-9 with the visitation- and
    policy-dependent modulus `pl_constant`.  The same modulus bounds the
    value function's suboptimality for the min player at fixed opponent:
    0.5*||grad_y J||^2 >= mu * (J - min_y J).
    """
    rng = np.random.default_rng(seed + 4)
    worst_gap = worst_j = -np.inf
    for _ in range(n_points):
        n, k = int(rng.integers(2, 5)), int(rng.integers(2, 4))
        gamma = float(rng.uniform(0.5, 0.95))
        game, model = _random_instance(rng, n, k, k, gamma,
                                       tau_min=float(rng.uniform(0.05, 0.2)),
                                       tau_max=float(rng.uniform(0.05, 0.2)))
        x = rng.normal(scale=0.5, size=model.incentive_params.shape)
        model = model.with_params(x)
        pmin, pmax = _random_pols(rng, n, k, k)
        mu = pl_constant(game, pmin, pmax)

        ni = ni_gradients(game, model, pmin, pmax, tol=1e-10)
        sq = 0.5 * (float(np.sum(ni.grad_min ** 2))
                    + float(np.sum(ni.grad_max ** 2)))
        worst_gap = max(worst_gap, mu * ni.gap - 1e-9 - sq)

        j = j_value(game, model, pmin, pmax)
        j2 = best_response(game, model, pmax, "min", tol=1e-10).j_value
        gmin = exact_grad_policy(game, model, pmin, pmax, "min")
        worst_j = max(worst_j, mu * (j - j2) - 1e-9
                      - 0.5 * float(np.sum(gmin ** 2)))
    return [
        CheckResult("pl-gap-inequality", float(worst_gap), 0.0),
        CheckResult("pl-value-inequality", float(worst_j), 0.0),
    ]


SUITES = {
    "operators": operator_suite,
    "equilibrium": equilibrium_suite,
    "gradients": gradient_suite,
    "estimators": estimator_suite,
    "pl": pl_suite,
}


def run_suite(name: str) -> list[CheckResult]:
    if name == "all":
        out: list[CheckResult] = []
        for fn in SUITES.values():
            out.extend(fn())
        return out
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name]()
