"""Per-agent training signals under filtered feedback.

Routing: a reward predictor fit on selection-gated logs with clipped
inverse-propensity weights, doubly-robust candidate returns and the
removal-based marginal contribution. Collaboration: leave-one-out credit by
explicit counterfactual rollout. Plus the winner-take-all and shared-reward
baselines and the rollout-averaged multi-turn reward.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .env import Context, DeployedOutput, EnvSpec, Proposal
from .errors import ConfigError, UsageError
from .mechanism import Aggregator, LoggedObservation, Router, route_probabilities_without, select
from .policy import ReplacementPolicy, conditioning_input, sample_replacement
from .rollout import complete_proposals, continue_from, continue_from_output

ESTIMATOR_KINDS = ("wta", "dr", "loo", "shared")


@dataclass(frozen=True)
class MarginalContribution:
    agent: int
    turn: int
    value: float
    estimator_kind: str

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError(f"non-finite marginal contribution for agent {self.agent}")


@dataclass(frozen=True)
class CandidateReturnEstimate:
    candidate: int
    value: float


# -- reward predictor -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class RewardPredictor:
    """Linear predictor of a candidate's return-to-go.

    ``psi`` has shape ``(d, K*V)``: the prediction for agent ``i`` proposing
    token ``v`` in a context with features ``x`` is ``x @ psi[:, i*V + v]``.
    """

    psi: np.ndarray
    K: int
    V: int
    learning_rate: float = 0.5
    propensity_floor: float = 0.05
    ips_clip: float = 3.0
    replay_capacity: int = 50_000
    replay_batch: int = 64

    def __post_init__(self):
        psi = np.array(self.psi, dtype=float)
        if psi.ndim != 2 or psi.shape[1] != self.K * self.V:
            raise ConfigError(f"psi must have K*V={self.K * self.V} columns, got {psi.shape}")
        if not np.all(np.isfinite(psi)):
            raise ConfigError("psi must be finite")
        psi.setflags(write=False)
        object.__setattr__(self, "psi", psi)

    @classmethod
    def zeros(cls, d: int, K: int, V: int, **config) -> "RewardPredictor":
        return cls(np.zeros((d, K * V)), K, V, **config)

    def with_psi(self, psi: np.ndarray) -> "RewardPredictor":
        return RewardPredictor(
            psi, self.K, self.V, self.learning_rate, self.propensity_floor,
            self.ips_clip, self.replay_capacity, self.replay_batch,
        )

    def router(self, tau: float, epsilon: float) -> Router:
        """Router whose scores are this predictor's predictions."""
        return Router(self.psi, self.K, self.V, tau, epsilon)


def predict_return(pred: RewardPredictor, ctx: Context, candidate: Proposal, agent: Optional[int] = None) -> float:
    agent = candidate.agent if agent is None else agent
    return float(ctx.features @ pred.psi[:, agent * pred.V + candidate.token])


def ips_weight(propensity: float, floor: float = 0.05, clip: float = 3.0) -> float:
    """``min(1 / max(p, floor), clip)``."""
    return min(1.0 / max(propensity, floor), clip)


class ReplayBuffer:
    """Bounded FIFO of logged observations."""

    def __init__(self, capacity: int = 50_000, records: Sequence[LoggedObservation] = ()):
        if capacity < 1:
            raise ConfigError("replay capacity must be positive")
        self.capacity = capacity
        self._records = deque(records, maxlen=capacity)

    def add(self, obs: LoggedObservation) -> None:
        self._records.append(obs)

    def extend(self, observations) -> None:
        self._records.extend(observations)

    def __len__(self) -> int:
        return len(self._records)

    def __iter__(self):
        return iter(self._records)

    def sample(self, n: int, rng: np.random.Generator) -> list:
        idx = rng.integers(0, len(self._records), size=n)
        return [self._records[k] for k in idx]


def update_predictor(pred: RewardPredictor, buffer: ReplayBuffer, rng: np.random.Generator) -> RewardPredictor:
    """One weighted least-squares gradient step on a replay batch.

    Only the selected candidate of each record contributes a target.
    """
    if len(buffer) == 0:
        raise UsageError("cannot update the predictor from an empty buffer")
    batch = buffer.sample(pred.replay_batch, rng)
    grad = np.zeros_like(pred.psi)
    for obs in batch:
        cand = obs.candidates[obs.selected]
        w = ips_weight(obs.propensities[obs.selected], pred.propensity_floor, pred.ips_clip)
        col = cand.agent * pred.V + cand.token
        err = obs.ctx.features @ pred.psi[:, col] - obs.observed_return
        grad[:, col] += w * err * obs.ctx.features
    return pred.with_psi(pred.psi - pred.learning_rate * grad / len(batch))


# -- routing estimators -----------------------------------------------------------

def dr_candidate_return(obs: LoggedObservation, j: int, pred: RewardPredictor) -> CandidateReturnEstimate:
    """``mu(h, a_j) + 1{I = j} / p_j * (G - mu(h, a_j))``."""
    mu = predict_return(pred, obs.ctx, obs.candidates[j])
    if j != obs.selected:
        return CandidateReturnEstimate(j, mu)
    p = obs.propensities[j]
    if p <= 0:
        raise ConfigError("selected candidate has zero logged propensity")
    return CandidateReturnEstimate(j, mu + (obs.observed_return - mu) / p)


def routing_marginal_contribution(
    obs: LoggedObservation, i: int, pred: RewardPredictor, router: Router
) -> MarginalContribution:
    """``sum_j p_j G_j - sum_{j != i} p^{-i}_j G_j`` with doubly-robust ``G_j``.

    ``p`` are the logged propensities; ``p^{-i}`` is recomputed from ``router``.
    """
    if obs.K < 2:
        raise UsageError("cannot remove sole agent")
    g = np.array([dr_candidate_return(obs, j, pred).value for j in range(obs.K)])
    p_without = route_probabilities_without(router, obs.ctx, obs.candidates, i)
    value = float(np.dot(obs.propensities, g) - np.dot(p_without, np.delete(g, i)))
    return MarginalContribution(i, obs.turn, value, "dr")


def winner_take_all_signal(obs: LoggedObservation, i: int) -> MarginalContribution:
    value = obs.observed_return if i == obs.selected else 0.0
    return MarginalContribution(i, obs.turn, value, "wta")


def shared_signal(G: float, K: int, turn: int = 0) -> list:
    return [MarginalContribution(i, turn, float(G), "shared") for i in range(K)]


# -- collaborative leave-one-out -----------------------------------------------------

@dataclass(frozen=True)
class EpisodeState:
    """What is known at turn ``t``: the context, realized proposals and realized return-to-go."""

    ctx: Context
    proposals: tuple
    turn: int
    realized_return: float


def counterfactual_proposals(policies, ctx: Context, proposals, i: int, q: ReplacementPolicy, rng) -> list:
    """Keep ``a^(1:i-1)``, draw ``a~^(i) ~ q`` and resample every later agent."""
    pol = policies[i]
    z = conditioning_input(ctx, tuple(proposals[:i]), pol.K, pol.V, pol.conditioning)
    try:
        tilde = sample_replacement(q, z, rng)
    except Exception as exc:  # noqa: BLE001 - surface as a configuration problem
        raise ConfigError(f"replacement policy undefined for agent {i}: {exc}") from exc
    tilde = Proposal(i, tilde.token)
    return complete_proposals(policies, ctx, list(proposals[:i]) + [tilde], rng)


def counterfactual_return(state: EpisodeState, i: int, q: ReplacementPolicy, policies, mechanism: Aggregator, env: EnvSpec, rng) -> float:
    """One draw of ``G_t^{-i}`` with fresh mechanism and environment randomness."""
    cf = counterfactual_proposals(policies, state.ctx, state.proposals, i, q, rng)
    return continue_from(env, policies, mechanism, state.ctx, cf, state.turn, rng)


def loo_marginal_contribution(
    state: EpisodeState,
    i: int,
    q: ReplacementPolicy,
    policies,
    mechanism: Aggregator,
    env: EnvSpec,
    rng: np.random.Generator,
) -> MarginalContribution:
    """``G_t - G_t^{-i}`` from one counterfactual rollout."""
    if isinstance(mechanism, Router):
        raise UsageError("leave-one-out credit needs a collaborative mechanism")
    g_cf = counterfactual_return(state, i, q, policies, mechanism, env, rng)
    return MarginalContribution(i, state.turn, state.realized_return - g_cf, "loo")


def removal_return(
    router: Router, env: EnvSpec, policies, ctx: Context, candidates, i: int, turn: int, rng
) -> float:
    """One draw of the routed return-to-go with agent ``i`` removed from the candidate set."""
    rest = [c for j, c in enumerate(candidates) if j != i]
    p = route_probabilities_without(router, ctx, candidates, i)
    pick = rest[select(p, rng)]
    y = DeployedOutput((pick.agent, pick.token))
    return continue_from_output(env, policies, router, ctx, y, turn, rng)


# -- multi-turn-aware reward ---------------------------------------------------------

def mr_estimate(
    ctx: Context,
    y: DeployedOutput,
    policies,
    mechanism,
    env: EnvSpec,
    n_rollouts: int,
    rng: np.random.Generator,
    turn: int = 0,
) -> float:
    """Rollout-averaged return-to-go after deploying ``y``.

    On the last turn (in particular for single-turn envs) this is the terminal
    score itself, with no sampling.
    """
    if n_rollouts < 1:
        raise ConfigError("n_rollouts must be at least 1")
    if turn + 1 >= env.T:
        return env.expected_reward(ctx, y)
    total = 0.0
    for _ in range(n_rollouts):
        total += continue_from_output(env, policies, mechanism, ctx, y, turn, rng)
    return total / n_rollouts

