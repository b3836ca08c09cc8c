"""Episode simulation: joint proposals -> mechanism -> reward -> transition."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .env import Context, DeployedOutput, EnvSpec, Proposal, reward, sample_context, transition
from .mechanism import (
    Aggregator,
    Router,
    aggregate,
    draw_mech_seed,
    route_probabilities,
    routed_output,
    select_with_seed,
)
from .policy import AgentPolicy, encode_for, propose

Mechanism = Union[Router, Aggregator]


@dataclass(frozen=True)
class Deployment:
    output: DeployedOutput
    selected: Optional[int] = None
    propensities: Optional[np.ndarray] = None
    mech_seed: Optional[int] = None


def deploy(mechanism: Mechanism, ctx: Context, proposals: Sequence[Proposal], rng) -> Deployment:
    if isinstance(mechanism, Router):
        probs = route_probabilities(mechanism, ctx, proposals)
        seed = draw_mech_seed(rng)
        sel = select_with_seed(probs, seed)
        return Deployment(routed_output(proposals, sel), sel, probs, seed)
    return Deployment(aggregate(mechanism, ctx, proposals))


def complete_proposals(policies: Sequence[AgentPolicy], ctx: Context, prefix: Sequence[Proposal], rng):
    """Sample agents ``len(prefix)..K-1`` in order, conditioning on the running prefix."""
    props = list(prefix)
    for pol in policies[len(props):]:
        props.append(propose(pol, encode_for(pol, ctx, props), rng)[0])
    return props


def rollout_return(env: EnvSpec, policies, mechanism: Mechanism, ctx: Context, turn: int, rng) -> float:
    """Sampled return-to-go from the start of ``turn`` in context ``ctx``."""
    total = 0.0
    for t in range(turn, env.T):
        props = complete_proposals(policies, ctx, (), rng)
        dep = deploy(mechanism, ctx, props, rng)
        total += reward(env, ctx, dep.output, rng)
        if t + 1 < env.T:
            ctx = transition(env, ctx, dep.output, rng)
    return total


def continue_from_output(env: EnvSpec, policies, mechanism, ctx: Context, y: DeployedOutput, turn: int, rng) -> float:
    """Sampled return-to-go once ``y`` has been deployed at ``turn``."""
    total = reward(env, ctx, y, rng)
    if turn + 1 < env.T:
        nxt = transition(env, ctx, y, rng)
        total += rollout_return(env, policies, mechanism, nxt, turn + 1, rng)
    return total


def continue_from(env: EnvSpec, policies, mechanism, ctx: Context, proposals, turn: int, rng) -> float:
    """Sampled return-to-go once all K proposals of ``turn`` are fixed."""
    dep = deploy(mechanism, ctx, proposals, rng)
    return continue_from_output(env, policies, mechanism, ctx, dep.output, turn, rng)


@dataclass(frozen=True)
class TurnRecord:
    turn: int
    ctx: Context
    proposals: tuple
    log_probs: tuple
    deployment: Deployment
    reward: float


def run_episode(env: EnvSpec, policies, mechanism: Mechanism, rng, ctx: Optional[Context] = None):
    """Simulate one episode; returns ``(turn records, returns-to-go per turn)``."""
    if ctx is None:
        ctx = sample_context(env, rng)
    records = []
    for t in range(env.T):
        props, logps = [], []
        for pol in policies:
            p, lp = propose(pol, encode_for(pol, ctx, props), rng)
            props.append(p)
            logps.append(lp)
        dep = deploy(mechanism, ctx, props, rng)
        r = reward(env, ctx, dep.output, rng)
        records.append(TurnRecord(t, ctx, tuple(props), tuple(logps), dep, r))
        if t + 1 < env.T:
            ctx = transition(env, ctx, dep.output, rng)
    rtg = np.cumsum([rec.reward for rec in records][::-1])[::-1]
    return records, [float(g) for g in rtg]
