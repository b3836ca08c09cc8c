"""Synthetic episodic environments with tabular, fully enumerable dynamics.

Every environment is a finite set of contexts, a finite set of deployable
outputs and dense reward / transition tables over them, so that any
expectation the training code estimates by sampling can also be computed
exactly by summation.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .errors import ConfigError, UsageError

OUTPUT_KINDS = ("proposal", "tuple")
REWARD_NOISE = ("deterministic", "bernoulli")
MAX_TABLE_ENTRIES = 10**6


@dataclass(frozen=True)
class Context:
    id: int
    features: np.ndarray = field(repr=False, compare=False)

    def __hash__(self) -> int:
        return hash(self.id)


@dataclass(frozen=True)
class Proposal:
    agent: int
    token: int


@dataclass(frozen=True)
class DeployedOutput:
    """Canonical key of a deployed output.

    For routing the key is ``(agent, token)`` of the selected proposal; for
    aggregation it is the ordered tuple of all K tokens.
    """

    key: tuple

    def __str__(self) -> str:
        return "(" + ",".join(str(k) for k in self.key) + ")"


@dataclass(frozen=True, eq=False)
class EnvSpec:
    """Tabular environment.

    ``rewards[c, o]`` is the expected reward of deploying output index ``o``
    in context ``c``; ``transitions[c, o]`` is the next-context distribution
    (only for ``T > 1``). Output indices enumerate the output space in
    canonical order, see :meth:`output_index`.
    """

    name: str
    n_contexts: int
    d: int
    K: int
    V: int
    T: int
    output_kind: str
    rewards: np.ndarray
    reward_noise: str = "deterministic"
    transitions: Optional[np.ndarray] = None
    features: Optional[np.ndarray] = None
    initial: Optional[np.ndarray] = None
    context_labels: Optional[tuple] = None
    agent_specialties: Optional[tuple] = None
    description: str = ""

    def __post_init__(self):
        if self.n_contexts < 1 or self.K < 1 or self.V < 1 or self.T < 1:
            raise ConfigError("n_contexts, K, V and T must all be positive")
        if self.output_kind not in OUTPUT_KINDS:
            raise ConfigError(f"output_kind must be one of {OUTPUT_KINDS}")
        if self.reward_noise not in REWARD_NOISE:
            raise ConfigError(f"reward_noise must be one of {REWARD_NOISE}")
        if self.n_contexts * self.n_outputs > MAX_TABLE_ENTRIES:
            raise ConfigError("reward table too large to enumerate")

        rewards = np.array(self.rewards, dtype=float)
        if rewards.shape != (self.n_contexts, self.n_outputs):
            raise ConfigError(
                f"reward table has shape {rewards.shape}, "
                f"expected {(self.n_contexts, self.n_outputs)}"
            )
        if not np.all((rewards >= 0.0) & (rewards <= 1.0)):
            raise ConfigError("rewards must lie in [0, 1]")
        _freeze(self, "rewards", rewards)

        if self.features is None:
            if self.d != self.n_contexts:
                raise ConfigError("default one-hot features need d == n_contexts")
            feats = np.eye(self.n_contexts)
        else:
            feats = np.array(self.features, dtype=float)
        if feats.shape != (self.n_contexts, self.d) or not np.all(np.isfinite(feats)):
            raise ConfigError(f"features must be a finite {self.n_contexts}x{self.d} array")
        _freeze(self, "features", feats)

        if self.T > 1:
            if self.transitions is None:
                raise ConfigError("multi-turn environments need a transition table")
            trans = np.array(self.transitions, dtype=float)
            shape = (self.n_contexts, self.n_outputs, self.n_contexts)
            if trans.shape != shape:
                raise ConfigError(f"transition table has shape {trans.shape}, expected {shape}")
            if np.any(trans < 0) or np.max(np.abs(trans.sum(axis=-1) - 1.0)) > 1e-9:
                raise ConfigError("every transition row must be a distribution")
            _freeze(self, "transitions", trans)
        elif self.transitions is not None:
            _freeze(self, "transitions", None)

        if self.initial is None:
            init = np.full(self.n_contexts, 1.0 / self.n_contexts)
        else:
            init = np.array(self.initial, dtype=float)
            if init.shape != (self.n_contexts,) or np.any(init < 0) or abs(init.sum() - 1) > 1e-9:
                raise ConfigError("initial must be a distribution over contexts")
        _freeze(self, "initial", init)

        if self.context_labels is not None:
            if len(self.context_labels) != self.n_contexts:
                raise ConfigError("need one specialty label per context")
            object.__setattr__(self, "context_labels", tuple(self.context_labels))
        if self.agent_specialties is not None:
            if len(self.agent_specialties) != self.K:
                raise ConfigError("need one specialty per agent")
            object.__setattr__(self, "agent_specialties", tuple(self.agent_specialties))

    # -- output space ------------------------------------------------------
    @property
    def n_outputs(self) -> int:
        return self.K * self.V if self.output_kind == "proposal" else self.V**self.K

    def output_keys(self) -> list:
        if self.output_kind == "proposal":
            return [(i, v) for i in range(self.K) for v in range(self.V)]
        return list(itertools.product(range(self.V), repeat=self.K))

    def output_index(self, key: tuple) -> int:
        key = tuple(int(k) for k in key)
        if self.output_kind == "proposal":
            if len(key) != 2 or not (0 <= key[0] < self.K and 0 <= key[1] < self.V):
                raise KeyError(key)
            return key[0] * self.V + key[1]
        if len(key) != self.K or any(not 0 <= k < self.V for k in key):
            raise KeyError(key)
        idx = 0
        for k in key:
            idx = idx * self.V + k
        return idx

    def context(self, cid: int) -> Context:
        if not 0 <= cid < self.n_contexts:
            raise ConfigError(f"context id {cid} out of range [0, {self.n_contexts})")
        return Context(int(cid), self.features[cid])

    def expected_reward(self, ctx: Context, y: DeployedOutput) -> float:
        return float(self.rewards[ctx.id, self._lookup(ctx, y)])

    def _lookup(self, ctx: Context, y: DeployedOutput) -> int:
        try:
            if not 0 <= ctx.id < self.n_contexts:
                raise KeyError(ctx.id)
            return self.output_index(y.key)
        except KeyError:
            raise ConfigError(
                f"no reward entry for context {ctx.id}, output {y} in env {self.name!r}"
            ) from None

    @cached_property
    def optimum(self) -> float:
        """Best achievable expected return when any output may be deployed."""
        value = np.zeros(self.n_contexts)
        for _ in range(self.T):
            q = self.rewards.copy()
            if self.transitions is not None:
                q = q + self.transitions @ value
            value = q.max(axis=1)
        return float(self.initial @ value)


def _freeze(obj, name, arr):
    if isinstance(arr, np.ndarray):
        arr.setflags(write=False)
    object.__setattr__(obj, name, arr)


def categorical(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from a probability vector using one uniform variate."""
    # a plain loop beats cumsum/searchsorted for the short vectors used here
    weights = probs.tolist() if isinstance(probs, np.ndarray) else list(probs)
    u = rng.random() * sum(weights)
    acc = 0.0
    for k, w in enumerate(weights):
        acc += w
        if u < acc:
            return k
    return len(weights) - 1


def sample_context(env: EnvSpec, rng: np.random.Generator) -> Context:
    cid = categorical(env.initial, rng)
    return env.context(cid)


def reward(env: EnvSpec, ctx: Context, y: DeployedOutput, rng: np.random.Generator) -> float:
    mean = env.expected_reward(ctx, y)
    if env.reward_noise == "deterministic":
        return mean
    # draw even for degenerate probabilities so the stream stays aligned
    u = rng.random()
    return 1.0 if u < mean else 0.0


def transition(env: EnvSpec, ctx: Context, y: DeployedOutput, rng: np.random.Generator) -> Context:
    if env.T == 1 or env.transitions is None:
        raise UsageError(f"env {env.name!r} is single-turn; transition is undefined")
    row = env.transitions[ctx.id, env._lookup(ctx, y)]
    return env.context(categorical(row, rng))


def enumerate_outcomes(env: EnvSpec, ctx: Context) -> list:
    """All deployable outputs in ``ctx`` with their expected rewards."""
    row = env.rewards[ctx.id]
    return [(DeployedOutput(key), float(row[o])) for o, key in enumerate(env.output_keys())]


# -- config files ----------------------------------------------------------

_ENV_FIELDS = (
    "name", "n_contexts", "d", "K", "V", "T", "output_kind", "rewards", "reward_noise",
    "transitions", "features", "initial", "context_labels", "agent_specialties",
    "description",
)


def env_from_dict(data: dict) -> EnvSpec:
    unknown = set(data) - set(_ENV_FIELDS)
    if unknown:
        raise ConfigError(f"unknown env keys: {sorted(unknown)}")
    data = dict(data)
    data.setdefault("name", "custom")
    data.setdefault("d", data.get("n_contexts"))
    missing = [k for k in ("n_contexts", "K", "V", "T", "output_kind", "rewards") if k not in data]
    if missing:
        raise ConfigError(f"env config missing keys: {missing}")
    return EnvSpec(**data)


def env_to_dict(env: EnvSpec) -> dict:
    out = {}
    for name in _ENV_FIELDS:
        value = getattr(env, name)
        if isinstance(value, np.ndarray):
            value = value.tolist()
        elif isinstance(value, tuple):
            value = list(value)
        out[name] = value
    return out


def load_env(path: str | Path) -> EnvSpec:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return env_from_dict(data.get("env", data))


def save_env(env: EnvSpec, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump({"env": env_to_dict(env)}, fh, sort_keys=False)

