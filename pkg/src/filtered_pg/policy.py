"""Linear-softmax agent policies and replacement (baseline) distributions.

Agent ``i`` sees an encoded conditioning input ``x = features(h) ⊕ enc(prefix)``
and samples one vocabulary symbol from ``softmax(x @ theta)``. Under the
autoregressive factorization ``enc(prefix)`` is a concatenation of one-hot
blocks, one per earlier agent, zero-padded for agents that have not acted
(or that come later); under the independent factorization it is empty.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .env import Context, Proposal, categorical
from .errors import ConfigError

CONDITIONING = ("independent", "autoregressive")


def input_dim(d: int, K: int, V: int, conditioning: str) -> int:
    if conditioning == "independent":
        return d
    if conditioning == "autoregressive":
        return d + max(K - 1, 0) * V
    raise ConfigError(f"conditioning must be one of {CONDITIONING}, got {conditioning!r}")


@dataclass(frozen=True, eq=False)
class AgentPolicy:
    agent: int
    theta: np.ndarray
    K: int
    V: int
    d: int
    conditioning: str = "independent"

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        expected = (input_dim(self.d, self.K, self.V, self.conditioning), self.V)
        if theta.shape != expected:
            raise ConfigError(f"theta has shape {theta.shape}, expected {expected}")
        if not np.all(np.isfinite(theta)):
            raise ConfigError("theta must be finite")
        if not 0 <= self.agent < self.K:
            raise ConfigError(f"agent index {self.agent} out of range for K={self.K}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    def with_theta(self, theta: np.ndarray) -> "AgentPolicy":
        return AgentPolicy(self.agent, theta, self.K, self.V, self.d, self.conditioning)


def init_policies(
    K: int,
    V: int,
    d: int,
    conditioning: str = "independent",
    scale: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> list:
    """K policies with N(0, scale^2) weights (zeros, i.e. uniform, by default)."""
    rows = input_dim(d, K, V, conditioning)
    out = []
    for i in range(K):
        theta = np.zeros((rows, V))
        if scale > 0:
            if rng is None:
                raise ConfigError("random initialisation needs an rng")
            theta = scale * rng.standard_normal((rows, V))
        out.append(AgentPolicy(i, theta, K, V, d, conditioning))
    return out


@dataclass(frozen=True, eq=False)
class ConditioningInput:
    context: Context
    prefix: tuple
    encoded: np.ndarray = field(repr=False)


def conditioning_input(
    ctx: Context, prefix: Sequence[Proposal], K: int, V: int, conditioning: str
) -> ConditioningInput:
    """Encode ``z = (h, a^(1:i-1))`` for the given factorization."""
    prefix = tuple(prefix)
    if conditioning == "independent":
        return ConditioningInput(ctx, (), np.asarray(ctx.features, dtype=float))
    d = len(ctx.features)
    enc = np.zeros(d + max(K - 1, 0) * V)
    enc[:d] = ctx.features
    for p in prefix:
        if p.agent >= K - 1:
            raise ConfigError("prefix may only contain agents 0..K-2")
        enc[d + p.agent * V + p.token] = 1.0
    return ConditioningInput(ctx, prefix, enc)


def encode_for(policy: AgentPolicy, ctx: Context, prefix: Sequence[Proposal] = ()) -> ConditioningInput:
    pre = tuple(prefix)[: policy.agent] if policy.conditioning == "autoregressive" else ()
    return conditioning_input(ctx, pre, policy.K, policy.V, policy.conditioning)


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def action_probabilities(policy: AgentPolicy, z: ConditioningInput) -> np.ndarray:
    x = z.encoded
    if x.shape[0] != policy.theta.shape[0]:
        raise ConfigError(
            f"conditioning input has dimension {x.shape[0]}, policy expects {policy.theta.shape[0]}"
        )
    return _softmax(x @ policy.theta)


def propose(policy: AgentPolicy, z: ConditioningInput, rng: np.random.Generator):
    """Sample a proposal; returns ``(Proposal, log-probability)``."""
    probs = action_probabilities(policy, z)
    token = categorical(probs, rng)
    return Proposal(policy.agent, token), float(np.log(probs[token]))


def log_probability(policy: AgentPolicy, z: ConditioningInput, token: int) -> float:
    x = z.encoded
    logits = x @ policy.theta
    m = logits.max()
    return float(logits[token] - m - np.log(np.exp(logits - m).sum()))


def logprob_grad(policy: AgentPolicy, z: ConditioningInput, a: Proposal | int) -> np.ndarray:
    """Gradient of ``log pi(a | z)`` w.r.t. theta: ``outer(x, onehot(a) - pi)``."""
    token = a.token if isinstance(a, Proposal) else int(a)
    if not 0 <= token < policy.V:
        raise ConfigError(f"token {token} out of range for V={policy.V}")
    g = -action_probabilities(policy, z)
    g[token] += 1.0
    return np.outer(z.encoded, g)


def sample_joint(policies: Sequence[AgentPolicy], ctx: Context, rng: np.random.Generator):
    """Sample all K proposals in index order; returns ``(proposals, log_probs)``."""
    _check_joint(policies)
    proposals, logps = [], []
    for pol in policies:
        z = encode_for(pol, ctx, proposals)
        prop, lp = propose(pol, z, rng)
        proposals.append(prop)
        logps.append(lp)
    return proposals, logps


def _check_joint(policies: Sequence[AgentPolicy]) -> None:
    if not policies:
        raise ConfigError("need at least one policy")
    modes = {p.conditioning for p in policies}
    if len(modes) > 1:
        raise ConfigError(f"mixed conditioning modes: {sorted(modes)}")
    K = policies[0].K
    if len(policies) != K or any(p.K != K or p.agent != i for i, p in enumerate(policies)):
        raise ConfigError("policies must be agents 0..K-1 sharing the same K")


def joint_distribution(policies: Sequence[AgentPolicy], ctx: Context, start: int = 0, prefix=()):
    """Enumerate ``(proposals, probability)`` for agents ``start..K-1`` given a prefix.

    Probabilities are chained through :func:`action_probabilities`, so this is
    the exact distribution :func:`sample_joint` draws from.
    """
    prefix = list(prefix)
    if start >= len(policies):
        return [(tuple(prefix), 1.0)]
    pol = policies[start]
    probs = action_probabilities(pol, encode_for(pol, ctx, prefix))
    out = []
    for tok in range(pol.V):
        if probs[tok] == 0.0:
            continue
        for tail, pr in joint_distribution(policies, ctx, start + 1, prefix + [Proposal(start, tok)]):
            out.append((tail, probs[tok] * pr))
    return out


# -- replacement policies ----------------------------------------------------

REPLACEMENT_KINDS = ("fixed-token", "uniform", "frozen-copy")


@dataclass(frozen=True, eq=False)
class ReplacementPolicy:
    """Baseline distribution q_i used to draw the counterfactual proposal.

    ``frozen-copy`` holds a read-only snapshot tagged with ``version`` so it can
    never track the live parameters it was copied from.
    """

    kind: str
    agent: int
    V: int
    token: Optional[int] = None
    snapshot: Optional[AgentPolicy] = None
    version: int = 0

    def __post_init__(self):
        if self.kind not in REPLACEMENT_KINDS:
            raise ConfigError(f"replacement kind must be one of {REPLACEMENT_KINDS}")
        if self.kind == "fixed-token" and (self.token is None or not 0 <= self.token < self.V):
            raise ConfigError("fixed-token replacement needs a token in [0, V)")
        if self.kind == "frozen-copy" and self.snapshot is None:
            raise ConfigError("frozen-copy replacement needs a snapshot")

    @classmethod
    def fixed(cls, agent: int, V: int, token: int) -> "ReplacementPolicy":
        return cls("fixed-token", agent, V, token=token)

    @classmethod
    def uniform(cls, agent: int, V: int) -> "ReplacementPolicy":
        return cls("uniform", agent, V)

    @classmethod
    def frozen(cls, policy: AgentPolicy, version: int = 0) -> "ReplacementPolicy":
        snap = policy.with_theta(policy.theta.copy())
        return cls("frozen-copy", policy.agent, policy.V, snapshot=snap, version=version)


def replacement_probabilities(q: ReplacementPolicy, z: ConditioningInput) -> np.ndarray:
    if q.kind == "fixed-token":
        out = np.zeros(q.V)
        out[q.token] = 1.0
        return out
    if q.kind == "uniform":
        return np.full(q.V, 1.0 / q.V)
    return action_probabilities(q.snapshot, encode_for(q.snapshot, z.context, z.prefix))


def sample_replacement(q: ReplacementPolicy, z: ConditioningInput, rng: np.random.Generator) -> Proposal:
    if q.kind == "fixed-token":
        return Proposal(q.agent, q.token)
    if q.kind == "uniform":
        return Proposal(q.agent, int(rng.integers(q.V)))
    return propose(q.snapshot, encode_for(q.snapshot, z.context, z.prefix), rng)[0]


# -- serialization -----------------------------------------------------------

def save_policies(policies: Sequence[AgentPolicy], path: str | Path) -> None:
    """Write parameters as text: one header line then one theta row per line."""
    _check_joint(policies)
    p0 = policies[0]
    rows = p0.theta.shape[0]
    with open(path, "w") as fh:
        fh.write(f"# K={p0.K} V={p0.V} d={p0.d} conditioning={p0.conditioning} rows={rows}\n")
        for pol in policies:
            np.savetxt(fh, pol.theta, fmt="%.17g")


def load_policies(path: str | Path) -> list:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ConfigError(f"{path}: missing policy header")
        meta = dict(item.split("=", 1) for item in header[1:].split())
        K, V, d, rows = (int(meta[k]) for k in ("K", "V", "d", "rows"))
        flat = np.loadtxt(fh, ndmin=2)
    if flat.shape != (K * rows, V):
        raise ConfigError(f"{path}: expected {K * rows}x{V} parameters, found {flat.shape}")
    return [
        AgentPolicy(i, flat[i * rows:(i + 1) * rows], K, V, d, meta["conditioning"])
        for i in range(K)
    ]

