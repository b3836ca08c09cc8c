"""Embedded environments, addressable by name.

The multi-turn presets (``routing-multiturn``, ``collab-multiturn``) use
hand-made transition tables; they exist to exercise return-to-go machinery,
not to model any particular user.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .env import EnvSpec
from .errors import ConfigError


@dataclass(frozen=True)
class Preset:
    name: str
    build: Callable[[], EnvSpec]
    mechanism: str  # "router" or an aggregation rule
    conditioning: str
    summary: str


def _routing_basic() -> EnvSpec:
    # Three specialties, two contexts each. Every agent has one strong token per
    # context; the specialist's strong token is much better than anyone else's.
    n_ctx, K, V = 6, 3, 6
    labels = [c % 3 for c in range(n_ctx)]
    rewards = np.zeros((n_ctx, K * V))
    for c in range(n_ctx):
        for i in range(K):
            good = (2 * c + 3 * i + 1) % V
            base = np.full(V, 0.05)
            base[good] = 0.95 if i == labels[c] else 0.45
            rewards[c, i * V:(i + 1) * V] = base
    return EnvSpec(
        name="routing-basic", n_contexts=n_ctx, d=n_ctx, K=K, V=V, T=1,
        output_kind="proposal", rewards=rewards, reward_noise="bernoulli",
        context_labels=tuple(labels), agent_specialties=(0, 1, 2),
        description="3 agents, 6 contexts in 3 specialties; binary reward",
    )


def _routing_multiturn() -> EnvSpec:
    n_ctx, K, V = 2, 2, 2
    rewards = np.array([
        [0.8, 0.2, 0.3, 0.6],
        [0.1, 0.7, 0.9, 0.4],
    ])
    trans = np.zeros((n_ctx, K * V, n_ctx))
    for c in range(n_ctx):
        for o in range(K * V):
            # high-reward outputs tend to keep the dialogue in context 0
            p0 = 0.2 + 0.6 * rewards[c, o]
            trans[c, o] = [p0, 1 - p0]
    return EnvSpec(
        name="routing-multiturn", n_contexts=n_ctx, d=n_ctx, K=K, V=V, T=2,
        output_kind="proposal", rewards=rewards, reward_noise="bernoulli",
        transitions=trans, context_labels=(0, 1), agent_specialties=(0, 1),
        description="2-turn routing with output-dependent transitions (synthetic)",
    )


def _tuple_table(n_ctx: int, K: int, V: int, fn) -> np.ndarray:
    keys = list(itertools.product(range(V), repeat=K))
    return np.array([[fn(c, key) for key in keys] for c in range(n_ctx)])


def _collab_interaction() -> EnvSpec:
    # reward needs agent 1 to complement agent 0 (parity with the context) and
    # agent 2 to agree with agent 1; no single agent helps on its own
    def r(c, a):
        good = (a[0] ^ a[1]) == c
        agree = a[2] == a[1]
        return 0.05 + 0.6 * good + 0.3 * (good and agree)

    return EnvSpec(
        name="collab-interaction", n_contexts=2, d=2, K=3, V=2, T=1,
        output_kind="tuple", rewards=_tuple_table(2, 3, 2, r), reward_noise="bernoulli",
        description="3-agent pipeline whose reward depends jointly on all proposals",
    )


def _collab_independent() -> EnvSpec:
    targets = [(0, 1, 1), (1, 0, 1)]

    def r(c, a):
        return sum(a[k] == targets[c][k] for k in range(3)) / 3.0

    return EnvSpec(
        name="collab-independent", n_contexts=2, d=2, K=3, V=2, T=1,
        output_kind="tuple", rewards=_tuple_table(2, 3, 2, r), reward_noise="bernoulli",
        description="additive reward: each agent's best token is optimal on its own",
    )


def _collab_multiturn() -> EnvSpec:
    def r(c, a):
        return 0.9 if (a[0] ^ a[1]) == c else 0.2

    rewards = _tuple_table(2, 2, 2, r)
    trans = np.zeros((2, 4, 2))
    for c in range(2):
        for o, key in enumerate(itertools.product(range(2), repeat=2)):
            p_same = 0.7 if key[0] == key[1] else 0.3
            trans[c, o, c] = p_same
            trans[c, o, 1 - c] = 1 - p_same
    return EnvSpec(
        name="collab-multiturn", n_contexts=2, d=2, K=2, V=2, T=2,
        output_kind="tuple", rewards=rewards, reward_noise="bernoulli", transitions=trans,
        description="2-turn collaboration; agreement keeps the context (synthetic)",
    )


def _counterexample(reward_agent: int, name: str) -> Callable[[], EnvSpec]:
    def build() -> EnvSpec:
        rewards = _tuple_table(1, 2, 2, lambda c, a: float(a[reward_agent]))
        return EnvSpec(
            name=name, n_contexts=1, d=1, K=2, V=2, T=1, output_kind="tuple",
            rewards=rewards, reward_noise="deterministic",
            description=f"tuple-identity of two Bernoulli(1/2) proposals, reward = a^({reward_agent})",
        )
    return build


PRESETS = {
    p.name: p
    for p in (
        Preset("routing-basic", _routing_basic, "router", "independent",
               "competitive routing with specialists (training benchmark)"),
        Preset("routing-multiturn", _routing_multiturn, "router", "independent",
               "two-turn routing, return-to-go targets"),
        Preset("collab-interaction", _collab_interaction, "tuple-identity", "autoregressive",
               "interaction-heavy collaborative rewards"),
        Preset("collab-independent", _collab_independent, "tuple-identity", "autoregressive",
               "independent-optimal collaborative rewards"),
        Preset("collab-multiturn", _collab_multiturn, "tuple-identity", "autoregressive",
               "two-turn collaboration"),
        Preset("counterexample-prop2", _counterexample(0, "counterexample-prop2"),
               "tuple-identity", "independent", "shared reward equals agent 0's bit"),
        Preset("counterexample-prop2-alt", _counterexample(1, "counterexample-prop2-alt"),
               "tuple-identity", "independent", "shared reward equals agent 1's bit"),
    )
}

_CACHE: dict = {}


def get_preset(name: str) -> EnvSpec:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    if name not in _CACHE:
        env = PRESETS[name].build()
        env.optimum  # noqa: B018 - computed once and stored with the preset
        _CACHE[name] = env
    return _CACHE[name]


def list_presets() -> list:
    rows = []
    for name, p in PRESETS.items():
        env = get_preset(name)
        rows.append({
            "name": name, "K": env.K, "V": env.V, "T": env.T, "n_contexts": env.n_contexts,
            "mechanism": p.mechanism, "conditioning": p.conditioning,
            "optimum": env.optimum, "summary": p.summary,
        })
    return rows
