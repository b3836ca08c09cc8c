"""Brute-force ground truth by exhaustive enumeration.

Nothing in this module samples, except :func:`gradient_variance_report`, which
is explicitly a Monte Carlo study that uses the exact marginal contribution as
one of its signals.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .env import Context, DeployedOutput, EnvSpec, Proposal, sample_context
from .errors import ConfigError, EnumerationError
from .estimator import counterfactual_proposals, removal_return
from .mechanism import Aggregator, Router, aggregate, route_probabilities, route_probabilities_without
from .policy import (
    AgentPolicy,
    ReplacementPolicy,
    action_probabilities,
    conditioning_input,
    encode_for,
    joint_distribution,
    logprob_grad,
    propose,
    replacement_probabilities,
)
from .rollout import complete_proposals, continue_from

ENUMERATION_LIMIT = 10**6
MAX_HORIZON = 3


def path_cardinality(policies: Sequence[AgentPolicy], mechanism, env: EnvSpec) -> int:
    """Number of (context, proposals, selection, next context) paths over the horizon."""
    K, V = env.K, env.V
    n_sel = K if isinstance(mechanism, Router) else 1
    per_turn = V**K * n_sel
    return env.n_contexts * per_turn**env.T * env.n_contexts ** (env.T - 1)


def _check(policies, mechanism, env: EnvSpec) -> None:
    if len(policies) != env.K:
        raise ConfigError(f"env has K={env.K} agents but {len(policies)} policies were given")
    if isinstance(mechanism, Router) and env.output_kind != "proposal":
        raise ConfigError("routing needs an env whose outputs are proposals")
    if isinstance(mechanism, Aggregator) and env.output_kind != mechanism.output_kind:
        raise ConfigError(f"aggregator produces {mechanism.output_kind!r} outputs, env expects {env.output_kind!r}")
    if env.T > MAX_HORIZON:
        raise EnumerationError(path_cardinality(policies, mechanism, env), ENUMERATION_LIMIT)
    card = path_cardinality(policies, mechanism, env)
    if card > ENUMERATION_LIMIT:
        raise EnumerationError(card, ENUMERATION_LIMIT)


def output_distribution(policies, mechanism, env: EnvSpec, ctx: Context, prefix=()) -> np.ndarray:
    """Exact distribution over deployed outputs given the first ``len(prefix)`` proposals."""
    dist = np.zeros(env.n_outputs)
    for props, pr in joint_distribution(policies, ctx, len(prefix), prefix):
        if isinstance(mechanism, Router):
            p = route_probabilities(mechanism, ctx, props)
            for j, c in enumerate(props):
                dist[env.output_index((c.agent, c.token))] += pr * p[j]
        else:
            dist[env.output_index(aggregate(mechanism, ctx, props).key)] += pr
    return dist


@dataclass
class ExactQuantities:
    """Cached exact values for one (policies, mechanism, env) triple."""

    policies: list
    mechanism: object
    env: EnvSpec

    def __post_init__(self):
        _check(self.policies, self.mechanism, self.env)
        env = self.env
        self.out_dist = np.stack([
            output_distribution(self.policies, self.mechanism, env, env.context(c))
            for c in range(env.n_contexts)
        ])
        # values[t][c]: expected return-to-go from the start of turn t
        self.values = [np.zeros(env.n_contexts) for _ in range(env.T + 1)]
        for t in reversed(range(env.T)):
            self.values[t] = np.sum(self.out_dist * self.q_table(t), axis=1)
        self.occupancy = [env.initial.copy()]
        for t in range(env.T - 1):
            d = self.occupancy[-1]
            self.occupancy.append(np.einsum("c,co,con->n", d, self.out_dist, env.transitions))

    def q_table(self, t: int) -> np.ndarray:
        """Expected return-to-go of deploying each output at turn ``t``."""
        q = np.array(self.env.rewards, dtype=float)
        if t + 1 < self.env.T:
            q = q + self.env.transitions @ self.values[t + 1]
        return q

    @property
    def j_sys(self) -> float:
        return float(self.env.initial @ self.values[0])


def exact_system_objective(policies, mechanism, env: EnvSpec) -> float:
    return ExactQuantities(list(policies), mechanism, env).j_sys


def exact_utility(policies, router: Router, env: EnvSpec, i: int, turn: int = 0) -> float:
    """``E[p_i r(h, a_i)]`` at ``turn`` (contexts weighted by their occupancy)."""
    ex = ExactQuantities(list(policies), router, env)
    total = 0.0
    for c in range(env.n_contexts):
        w = ex.occupancy[turn][c]
        if w == 0:
            continue
        ctx = env.context(c)
        for props, pr in joint_distribution(policies, ctx):
            p = route_probabilities(router, ctx, props)
            cand = props[i]
            total += w * pr * p[i] * env.rewards[c, env.output_index((cand.agent, cand.token))]
    return float(total)


def candidate_returns(ex: ExactQuantities, ctx: Context, candidates: Sequence[Proposal], turn: int = 0) -> np.ndarray:
    """``G^(j)``: expected return-to-go if candidate ``j`` is deployed."""
    q = ex.q_table(turn)[ctx.id]
    return np.array([q[ex.env.output_index((c.agent, c.token))] for c in candidates])


def routing_contribution(ex: ExactQuantities, ctx: Context, candidates, i: int, turn: int = 0) -> float:
    """``E[G - G^{-i} | h, a^(1:K)] = sum_j p_j G^(j) - sum_{j != i} p^{-i}_j G^(j)``."""
    router = ex.mechanism
    g = candidate_returns(ex, ctx, candidates, turn)
    p = route_probabilities(router, ctx, candidates)
    p_wo = route_probabilities_without(router, ctx, candidates, i)
    return float(p @ g - p_wo @ np.delete(g, i))


def _completion_value(ex: ExactQuantities, ctx: Context, prefix, turn: int) -> float:
    """``E[G_t | h, a^(1:len(prefix))]`` with the remaining agents sampled from their policies."""
    dist = output_distribution(ex.policies, ex.mechanism, ex.env, ctx, prefix)
    return float(dist @ ex.q_table(turn)[ctx.id])


def exact_marginal_contribution(
    policies,
    mechanism,
    env: EnvSpec,
    q: Optional[ReplacementPolicy],
    i: int,
    ctx: Context,
    prefix: Optional[Sequence[Proposal]],
    a_i: Proposal | int,
    turn: int = 0,
    ex: Optional[ExactQuantities] = None,
) -> float:
    """``E[G_t - G_t^{-i} | z, a^(i)]`` by enumeration.

    Collaborative mechanisms replace ``a^(i)`` by a draw from ``q`` and resample
    later agents; routers remove candidate ``i`` instead (``q`` is unused).
    ``prefix=None`` integrates the earlier agents out, which is the right
    conditioning when policies are independent (``z = h``).
    """
    ex = ex or ExactQuantities(list(policies), mechanism, env)
    token = a_i.token if isinstance(a_i, Proposal) else int(a_i)
    if prefix is None:
        return sum(
            pr * exact_marginal_contribution(policies, mechanism, env, q, i, ctx, pre, token, turn, ex)
            for pre, pr in joint_distribution(policies[:i], ctx)
        )
    prefix = list(prefix)
    if isinstance(mechanism, Router):
        total = 0.0
        for props, pr in joint_distribution(policies, ctx, i + 1, prefix + [Proposal(i, token)]):
            total += pr * routing_contribution(ex, ctx, props, i, turn)
        return total
    if q is None:
        raise ConfigError("collaborative marginal contribution needs a replacement policy")
    pol = policies[i]
    z = conditioning_input(ctx, tuple(prefix), pol.K, pol.V, pol.conditioning)
    q_probs = replacement_probabilities(q, z)
    actual = _completion_value(ex, ctx, prefix + [Proposal(i, token)], turn)
    baseline = sum(
        q_probs[v] * _completion_value(ex, ctx, prefix + [Proposal(i, v)], turn)
        for v in range(pol.V) if q_probs[v] > 0
    )
    return actual - baseline


def _prefix_weighted_terms(ex: ExactQuantities, i: int, fn):
    """Sum ``w * fn(t, ctx, prefix, z)`` over turns, contexts and prefixes of agent ``i``."""
    env, pols = ex.env, ex.policies
    total = None
    for t in range(env.T):
        for c in range(env.n_contexts):
            w = ex.occupancy[t][c]
            if w == 0:
                continue
            ctx = env.context(c)
            for pre, pr in joint_distribution(pols[:i], ctx):
                z = encode_for(pols[i], ctx, pre)
                val = w * pr * fn(t, ctx, list(pre), z)
                total = val if total is None else total + val
    return total


def exact_counterfactual_gradient(
    policies, mechanism, env: EnvSpec, i: int, q: Optional[ReplacementPolicy] = None
) -> np.ndarray:
    """``E[sum_t psi_{i,t} Delta_{i,t}]`` by enumeration (the analytic gradient of J)."""
    ex = ExactQuantities(list(policies), mechanism, env)
    pol = policies[i]
    q = q or ReplacementPolicy.uniform(i, env.V)

    def term(t, ctx, pre, z):
        probs = action_probabilities(pol, z)
        out = np.zeros_like(pol.theta)
        conditioning_prefix = pre if isinstance(mechanism, Aggregator) else None
        for v in range(pol.V):
            delta = exact_marginal_contribution(
                policies, mechanism, env, q, i, ctx, conditioning_prefix, v, t, ex
            )
            out += probs[v] * delta * logprob_grad(pol, z, v)
        return out

    return _prefix_weighted_terms(ex, i, term)


def exact_return_gradient(policies, mechanism, env: EnvSpec, i: int) -> np.ndarray:
    """``E[sum_t psi_{i,t} G_t]`` by enumeration."""
    ex = ExactQuantities(list(policies), mechanism, env)
    pol = policies[i]

    def term(t, ctx, pre, z):
        probs = action_probabilities(pol, z)
        out = np.zeros_like(pol.theta)
        for v in range(pol.V):
            g = _completion_value(ex, ctx, pre + [Proposal(i, v)], t)
            out += probs[v] * g * logprob_grad(pol, z, v)
        return out

    return _prefix_weighted_terms(ex, i, term)


def finite_difference_gradient(objective: Callable[[np.ndarray], float], theta: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``objective`` at ``theta``, one coordinate at a time."""
    if not step > 0:
        raise ConfigError("finite-difference step must be positive")
    theta = np.array(theta, dtype=float)
    grad = np.zeros_like(theta)
    for idx in np.ndindex(theta.shape):
        x = theta.copy()
        x[idx] = theta[idx] + step
        f_plus = objective(x)
        x[idx] = theta[idx] - step
        f_minus = objective(x)
        grad[idx] = (f_plus - f_minus) / (2 * step)
    return grad


def system_objective_of_agent(policies, mechanism, env: EnvSpec, i: int) -> Callable[[np.ndarray], float]:
    """``theta_i -> J_sys`` with every other agent held fixed."""
    def objective(theta):
        pols = list(policies)
        pols[i] = pols[i].with_theta(theta)
        return exact_system_objective(pols, mechanism, env)
    return objective


# -- risk sensitivity of softmax routing -----------------------------------------------

@dataclass(frozen=True)
class Discrete:
    values: tuple
    probs: tuple

    @property
    def mean(self) -> float:
        return float(np.dot(self.values, self.probs))


def point_mass(x: float) -> Discrete:
    return Discrete((float(x),), (1.0,))


def bernoulli(p: float, low: float = 0.0, high: float = 1.0) -> Discrete:
    return Discrete((low, high), (1.0 - p, p))


def routed_utility(
    sigma: Callable[[float], float], own: Discrete, others: Sequence[Discrete], tau: float = 1.0, epsilon: float = 0.0
) -> float:
    """``U_i`` when scores are ``sigma(reward)`` and candidate rewards are independent.

    Uses ``U = (1-eps) E[psi_C(r)] + eps/K E[r]`` with
    ``psi_c(r) = e^{sigma(r)/tau} r / (e^{sigma(r)/tau} + c)``, enumerating the
    joint outcomes of the other agents to get the law of ``C``.
    """
    K = len(others) + 1
    c_law = {0.0: 1.0}
    for dist in others:
        nxt = {}
        for c, pc in c_law.items():
            for v, pv in zip(dist.values, dist.probs):
                key = c + np.exp(sigma(v) / tau)
                nxt[key] = nxt.get(key, 0.0) + pc * pv
        c_law = nxt
    expected_psi = 0.0
    for c, pc in c_law.items():
        for r, pr in zip(own.values, own.probs):
            w = np.exp(sigma(r) / tau)
            expected_psi += pc * pr * w / (w + c) * r
    return float((1 - epsilon) * expected_psi + epsilon / K * own.mean)


def risk_sensitivity_demo(
    sigma: Callable[[float], float],
    dist_a: Discrete,
    dist_b: Discrete,
    others: Optional[Sequence[Discrete]] = None,
    tau: float = 1.0,
    epsilon: float = 0.0,
):
    """Utilities of one agent under two equal-mean reward laws; returns ``(U_A, U_B)``.

    ``others`` defaults to a single competitor with Bernoulli(1/2) reward.
    """
    if abs(dist_a.mean - dist_b.mean) > 1e-12:
        raise ConfigError(f"distributions must share their mean ({dist_a.mean} vs {dist_b.mean})")
    others = list(others) if others is not None else [bernoulli(0.5)]
    return (
        routed_utility(sigma, dist_a, others, tau, epsilon),
        routed_utility(sigma, dist_b, others, tau, epsilon),
    )


# -- shared reward does not identify contribution --------------------------------------

def shared_reward_counterexample() -> dict:
    """Two tuple-identity mechanisms with equal reward laws but different credit for agent 0."""
    from .presets import get_preset

    report = {"mechanisms": {}}
    agg = Aggregator("tuple-identity")
    for label, name in (("r", "counterexample-prop2"), ("r_prime", "counterexample-prop2-alt")):
        env = get_preset(name)
        pols = uniform_policies(env)
        ex = ExactQuantities(pols, agg, env)
        ctx = env.context(0)
        p_one = float(ex.out_dist[0] @ env.rewards[0])
        q = ReplacementPolicy.uniform(0, env.V)
        marginals = {
            a: exact_marginal_contribution(pols, agg, env, q, 0, ctx, (), a, 0, ex) for a in (0, 1)
        }
        report["mechanisms"][label] = {
            "env": name,
            "reward_law": {"P(reward=1)": p_one, "P(reward=0)": 1.0 - p_one},
            "agent0_marginal": {str(a): m for a, m in marginals.items()},
        }
    r, rp = report["mechanisms"]["r"], report["mechanisms"]["r_prime"]
    report["same_reward_law"] = abs(r["reward_law"]["P(reward=1)"] - rp["reward_law"]["P(reward=1)"]) < 1e-12
    report["different_marginals"] = any(
        abs(r["agent0_marginal"][a] - rp["agent0_marginal"][a]) > 1e-12 for a in ("0", "1")
    )
    return report


def uniform_policies(env: EnvSpec, conditioning: Optional[str] = None) -> list:
    from .policy import init_policies
    from .presets import PRESETS

    if conditioning is None and env.name in PRESETS:
        conditioning = PRESETS[env.name].conditioning
    mode = conditioning or ("independent" if env.output_kind == "proposal" else "autoregressive")
    return init_policies(env.K, env.V, env.d, mode)


# -- variance of gradient estimators -----------------------------------------------------

def sample_conditioned(policies, env: EnvSpec, i: int, rng):
    """Draw ``(ctx, prefix, a_i)`` at turn 0 from the on-policy distribution."""
    ctx = sample_context(env, rng)
    prefix = complete_proposals(policies[:i], ctx, (), rng)
    a_i = propose(policies[i], encode_for(policies[i], ctx, prefix), rng)[0]
    return ctx, prefix, a_i


def realized_and_counterfactual(policies, mechanism, env: EnvSpec, q, i: int, ctx, prefix, a_i, rng):
    """One joint draw of ``(G_0, G_0^{-i})`` given ``(h, a^(1:i-1), a^(i))``."""
    props = complete_proposals(policies, ctx, list(prefix) + [a_i], rng)
    g = continue_from(env, policies, mechanism, ctx, props, 0, rng)
    if isinstance(mechanism, Router):
        g_cf = removal_return(mechanism, env, policies, ctx, props, i, 0, rng)
    else:
        cf = counterfactual_proposals(policies, ctx, props, i, q, rng)
        g_cf = continue_from(env, policies, mechanism, ctx, cf, 0, rng)
    return g, g_cf


def gradient_variance_report(
    policies,
    mechanism,
    env: EnvSpec,
    i: int,
    n_samples: int,
    rng: np.random.Generator,
    q: Optional[ReplacementPolicy] = None,
) -> dict:
    """Monte Carlo moments of ``psi * signal`` for shared ``G``, ``G - G^{-i}`` and exact ``Delta``.

    Variances are totals over parameter coordinates (trace of the covariance);
    standard errors of variance gaps use the per-sample squared deviations.
    """
    if n_samples < 10_000:
        raise ConfigError("gradient_variance_report needs n_samples >= 10^4")
    q = q or ReplacementPolicy.uniform(i, env.V)
    ex = ExactQuantities(list(policies), mechanism, env)
    pol = policies[i]
    delta_cache: dict = {}
    dim = pol.theta.size
    psi_g = np.empty((n_samples, dim))
    psi_loo = np.empty((n_samples, dim))
    psi_delta = np.empty((n_samples, dim))
    psi_cf = np.empty((n_samples, dim))
    for n in range(n_samples):
        ctx, prefix, a_i = sample_conditioned(policies, env, i, rng)
        g, g_cf = realized_and_counterfactual(policies, mechanism, env, q, i, ctx, prefix, a_i, rng)
        key = (ctx.id, tuple(p.token for p in prefix), a_i.token)
        if key not in delta_cache:
            cond_prefix = prefix if isinstance(mechanism, Aggregator) else None
            delta_cache[key] = exact_marginal_contribution(
                policies, mechanism, env, q, i, ctx, cond_prefix, a_i, 0, ex
            )
        psi = logprob_grad(pol, encode_for(pol, ctx, prefix), a_i).ravel()
        psi_g[n] = psi * g
        psi_loo[n] = psi * (g - g_cf)
        psi_delta[n] = psi * delta_cache[key]
        psi_cf[n] = psi * g_cf
    return summarize_variance(psi_g, psi_loo, psi_delta, psi_cf)


def summarize_variance(psi_g, psi_loo, psi_delta, psi_cf) -> dict:
    n = psi_g.shape[0]

    def centered(x):
        return x - x.mean(axis=0)

    sq = {name: np.sum(centered(x) ** 2, axis=1) for name, x in
          (("shared", psi_g), ("loo", psi_loo), ("delta", psi_delta), ("cf", psi_cf))}
    total_var = {name: float(s.mean()) for name, s in sq.items()}

    def gap(a, b):
        d = sq[a] - sq[b]
        return {"gap": float(d.mean()), "se": float(d.std() / np.sqrt(n))}

    cross = float(np.mean(np.sum(centered(psi_loo) * centered(psi_cf), axis=1)))
    residual = total_var["shared"] - (total_var["loo"] + total_var["cf"] + 2 * cross)
    mean_diff = psi_g - psi_delta
    mean_se = mean_diff.std(axis=0) / np.sqrt(n)
    loo_diff = psi_g - psi_loo
    report = {
        "n_samples": n,
        "mean": {
            "shared": psi_g.mean(axis=0).tolist(),
            "loo": psi_loo.mean(axis=0).tolist(),
            "delta": psi_delta.mean(axis=0).tolist(),
        },
        "mean_diff_shared_delta": mean_diff.mean(axis=0).tolist(),
        "mean_diff_se": mean_se.tolist(),
        "mean_diff_shared_loo": loo_diff.mean(axis=0).tolist(),
        "mean_diff_shared_loo_se": (loo_diff.std(axis=0) / np.sqrt(n)).tolist(),
        "elementwise_variance": {
            "shared": psi_g.var(axis=0).tolist(),
            "loo": psi_loo.var(axis=0).tolist(),
            "delta": psi_delta.var(axis=0).tolist(),
        },
        "total_variance": total_var,
        "gap_shared_loo": gap("shared", "loo"),
        "gap_loo_delta": gap("loo", "delta"),
        "decomposition": {
            "var_loo": total_var["loo"],
            "var_counterfactual": total_var["cf"],
            "two_cov": 2 * cross,
            "residual": residual,
            "var_shared_se": float(sq["shared"].std() / np.sqrt(n)),
        },
    }
    return report


def exact_routing_dr_expectation(
    obs_factory: Callable[[int, float], object],
    selection_law: np.ndarray,
    outcome_law: Callable[[int], Sequence[tuple]],
    estimate: Callable[[object], float],
) -> float:
    """Exact expectation of an estimate over the selection and the realized return.

    ``obs_factory(j, G)`` builds the log record when candidate ``j`` is selected
    and return ``G`` observed; ``outcome_law(j)`` lists ``(G, prob)`` pairs.
    """
    total = 0.0
    for j, pj in enumerate(selection_law):
        if pj == 0:
            continue
        for g, pg in outcome_law(j):
            total += pj * pg * estimate(obs_factory(j, g))
    return total


def reward_outcomes(env: EnvSpec, ctx: Context, y: DeployedOutput) -> list:
    """Law of the one-step reward of ``y`` in ``ctx`` as ``(value, prob)`` pairs."""
    m = env.expected_reward(ctx, y)
    if env.reward_noise == "deterministic":
        return [(m, 1.0)]
    return [(1.0, m), (0.0, 1.0 - m)]
