"""Policy updates: score-function (REINFORCE) ascent on marginal-contribution
signals, and a clipped group-relative surrogate with an exact KL penalty."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .env import Context
from .errors import ConfigError
from .policy import (
    AgentPolicy,
    ConditioningInput,
    action_probabilities,
    log_probability,
    logprob_grad,
)


@dataclass(frozen=True)
class OptimizerConfig:
    clip_eps: float = 0.2
    kl_beta: float = 0.02
    learning_rate: float = 0.05
    norm_delta: float = 1e-8
    grad_clip_norm: float = 1.0

    def __post_init__(self):
        if not 0 < self.clip_eps < 1 and self.clip_eps != float("inf"):
            raise ConfigError("clip_eps must lie in (0, 1) (or be inf to disable clipping)")
        if self.kl_beta < 0:
            raise ConfigError("kl_beta must be non-negative")
        if not self.norm_delta > 0:
            raise ConfigError("norm_delta must be positive")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")


# transformer-adapter scale learning rate; far too slow for linear softmax
ADAPTER_SCALE = OptimizerConfig(learning_rate=1e-5)
CONFIG_PRESETS = {"default": OptimizerConfig(), "paper-llm": ADAPTER_SCALE}


@dataclass(frozen=True, eq=False)
class PolicySnapshot:
    policy: AgentPolicy

    def probabilities(self, z: ConditioningInput) -> np.ndarray:
        return action_probabilities(self.policy, z)


def capture_snapshot(policy: AgentPolicy | PolicySnapshot) -> PolicySnapshot:
    if isinstance(policy, PolicySnapshot):
        policy = policy.policy
    return PolicySnapshot(policy.with_theta(policy.theta.copy()))


def clip_by_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    norm = float(np.linalg.norm(grad))
    if max_norm is not None and norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def group_normalized_advantages(signals: Sequence[float], delta: float = 1e-8) -> np.ndarray:
    """``(g - mean) / (population std + delta)``."""
    g = np.asarray(signals, dtype=float)
    if g.size < 2:
        raise ConfigError("group normalization needs at least two samples")
    centered = g - g.mean()
    return centered / (np.sqrt(np.mean(centered**2)) + delta)


# -- REINFORCE -----------------------------------------------------------------

def reinforce_gradient(policy: AgentPolicy, batch) -> np.ndarray:
    """``(1/|B|) sum psi(z, a) * signal`` for ``batch`` of ``(z, a, signal)``."""
    grad = np.zeros_like(policy.theta)
    n = 0
    for z, a, signal in batch:
        if not np.isfinite(signal):
            raise ConfigError("non-finite training signal")
        if signal != 0.0:
            grad += signal * logprob_grad(policy, z, a)
        n += 1
    return grad / max(n, 1)


def reinforce_update(policy: AgentPolicy, batch, lr: float = 0.05, grad_clip: float = 1.0) -> AgentPolicy:
    grad = clip_by_norm(reinforce_gradient(policy, batch), grad_clip)
    if not np.any(grad):
        return policy
    return policy.with_theta(policy.theta + lr * grad)


# -- GRPO -------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GrpoSample:
    z: ConditioningInput
    token: int
    signal: float
    old_logprob: float


@dataclass(frozen=True, eq=False)
class GrpoGroup:
    """N rollouts from one context for a single agent, with per-sample signals."""

    context: Context
    samples: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.samples) < 2:
            raise ConfigError("a GRPO group needs N >= 2 samples")
        if any(s.z.context.id != self.context.id for s in self.samples):
            raise ConfigError("all samples of a group must share its context")

    @property
    def N(self) -> int:
        return len(self.samples)


def make_group(context: Context, zs, tokens, signals, old: PolicySnapshot) -> GrpoGroup:
    samples = tuple(
        GrpoSample(z, int(a), float(s), log_probability(old.policy, z, int(a)))
        for z, a, s in zip(zs, tokens, signals)
    )
    return GrpoGroup(context, samples)


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * (np.log(p[mask]) - np.log(q[mask]))))


def _kl_logit_grad(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """d KL(softmax(u) || q) / du."""
    log_ratio = np.log(p) - np.log(q)
    return p * (log_ratio - np.dot(p, log_ratio))


def grpo_objective(policy: AgentPolicy, groups: Sequence[GrpoGroup], ref: PolicySnapshot, config: OptimizerConfig) -> float:
    surrogate, kl, n = 0.0, 0.0, 0
    for grp in groups:
        adv = group_normalized_advantages([s.signal for s in grp.samples], config.norm_delta)
        for s, a in zip(grp.samples, adv):
            rho = np.exp(log_probability(policy, s.z, s.token) - s.old_logprob)
            clipped = np.clip(rho, 1 - config.clip_eps, 1 + config.clip_eps)
            surrogate += min(rho * a, clipped * a)
            kl += kl_divergence(action_probabilities(policy, s.z), ref.probabilities(s.z))
            n += 1
    return (surrogate - config.kl_beta * kl) / n


def grpo_gradient(policy: AgentPolicy, groups: Sequence[GrpoGroup], ref: PolicySnapshot, config: OptimizerConfig) -> np.ndarray:
    """Gradient of :func:`grpo_objective` (before norm clipping)."""
    grad = np.zeros_like(policy.theta)
    n = 0
    for grp in groups:
        adv = group_normalized_advantages([s.signal for s in grp.samples], config.norm_delta)
        for s, a in zip(grp.samples, adv):
            probs = action_probabilities(policy, s.z)
            rho = np.exp(np.log(probs[s.token]) - s.old_logprob)
            if not np.isfinite(rho):
                raise ConfigError("non-finite importance ratio")
            saturated = (a > 0 and rho > 1 + config.clip_eps) or (a < 0 and rho < 1 - config.clip_eps)
            dlogits = np.zeros(policy.V)
            if not saturated and a != 0.0:
                score = -probs
                score[s.token] += 1.0
                dlogits += a * rho * score
            if config.kl_beta > 0:
                dlogits -= config.kl_beta * _kl_logit_grad(probs, ref.probabilities(s.z))
            grad += np.outer(s.z.encoded, dlogits)
            n += 1
    return grad / n


def grpo_update(
    policy: AgentPolicy,
    groups: Sequence[GrpoGroup],
    old: PolicySnapshot,
    ref: PolicySnapshot,
    config: OptimizerConfig = OptimizerConfig(),
) -> AgentPolicy:
    """One ascent step on the clipped surrogate minus the KL penalty.

    ``old`` is implicit in each sample's ``old_logprob``; it is accepted here so
    callers can assert which snapshot the group was built against.
    """
    for grp in groups:
        for s in grp.samples:
            expected = log_probability(old.policy, s.z, s.token)
            if abs(expected - s.old_logprob) > 1e-9:
                raise ConfigError("group was not built against the given old snapshot")
    grad = clip_by_norm(grpo_gradient(policy, groups, ref, config), config.grad_clip_norm)
    return policy.with_theta(policy.theta + config.learning_rate * grad)
