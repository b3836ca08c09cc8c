"""System mechanisms: the epsilon-mixed softmax router, deterministic
aggregation rules, reward allocation rules and the selection-gated log."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .env import Context, DeployedOutput, Proposal, categorical
from .errors import ConfigError, UsageError

LOG_SCHEMA_VERSION = 1


@dataclass(frozen=True, eq=False)
class Router:
    """Softmax router over candidate scores ``s(h, a_j) = x_h @ phi[:, agent_j*V + token_j]``.

    ``phi`` has one column per (agent, token) pair, i.e. the score is a bilinear
    function of the context features and the joint (agent, candidate) one-hot.
    """

    phi: np.ndarray
    K: int
    V: int
    tau: float = 1.0
    epsilon: float = 0.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"router temperature must be positive, got {self.tau}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ConfigError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        phi = np.array(self.phi, dtype=float)
        if phi.ndim != 2 or phi.shape[1] != self.K * self.V:
            raise ConfigError(f"phi must have K*V={self.K * self.V} columns, got {phi.shape}")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @classmethod
    def uniform(cls, d: int, K: int, V: int, tau: float = 1.0, epsilon: float = 0.0) -> "Router":
        return cls(np.zeros((d, K * V)), K, V, tau, epsilon)


def candidate_scores(router: Router, ctx: Context, candidates: Sequence[Proposal]) -> np.ndarray:
    cols = [c.agent * router.V + c.token for c in candidates]
    return ctx.features @ router.phi[:, cols]


def _mixed_softmax(scores: np.ndarray, tau: float, epsilon: float) -> np.ndarray:
    z = scores / tau
    e = np.exp(z - z.max())
    return (1.0 - epsilon) * e / e.sum() + epsilon / len(scores)


def route_probabilities(router: Router, ctx: Context, candidates: Sequence[Proposal]) -> np.ndarray:
    if len(candidates) < 1:
        raise ConfigError("routing needs at least one candidate")
    return _mixed_softmax(candidate_scores(router, ctx, candidates), router.tau, router.epsilon)


def route_probabilities_without(
    router: Router, ctx: Context, candidates: Sequence[Proposal], removed: int
) -> np.ndarray:
    """Router probabilities over the K-1 candidates left after deleting index ``removed``.

    The exploration mass is spread uniformly over the reduced set, i.e. the
    mixed softmax is simply re-evaluated on the shorter candidate list.
    """
    if len(candidates) < 2:
        raise UsageError("cannot remove sole agent")
    rest = [c for j, c in enumerate(candidates) if j != removed]
    return route_probabilities(router, ctx, rest)


def select(probabilities: np.ndarray, rng: np.random.Generator) -> int:
    p = np.asarray(probabilities, dtype=float)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ConfigError(f"not a probability vector: {p}")
    return categorical(p, rng)


def draw_mech_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


def select_with_seed(probabilities: np.ndarray, mech_seed: int) -> int:
    """Selection driven entirely by the logged mechanism seed."""
    return select(probabilities, np.random.default_rng(mech_seed))


# -- aggregation --------------------------------------------------------------

_CUSTOM_RULES: dict = {}


def register_aggregation_rule(tag: str, fn: Callable) -> None:
    """Register ``fn(ctx, proposals) -> key tuple`` as a pure aggregation rule."""
    if tag in ("select-max-score", "tuple-identity"):
        raise ConfigError(f"{tag!r} is a built-in rule")
    _CUSTOM_RULES[tag] = fn


@dataclass(frozen=True, eq=False)
class Aggregator:
    """Deterministic collaborative mechanism.

    ``tuple-identity`` deploys the ordered tuple of all tokens;
    ``select-max-score`` deploys the proposal with the highest fixed score
    ``scores[agent, token]`` (ties go to the lowest agent index).
    """

    rule: str = "tuple-identity"
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.rule == "select-max-score":
            if self.scores is None:
                raise ConfigError("select-max-score needs a (K, V) score table")
            object.__setattr__(self, "scores", np.array(self.scores, dtype=float))
        elif self.rule != "tuple-identity" and self.rule not in _CUSTOM_RULES:
            raise ConfigError(f"unknown aggregation rule {self.rule!r}")

    @property
    def output_kind(self) -> str:
        return "proposal" if self.rule == "select-max-score" else "tuple"


def aggregate(agg: Aggregator, ctx: Context, proposals: Sequence[Proposal]) -> DeployedOutput:
    if agg.rule == "tuple-identity":
        return DeployedOutput(tuple(p.token for p in proposals))
    if agg.rule == "select-max-score":
        vals = [agg.scores[p.agent, p.token] for p in proposals]
        best = proposals[int(np.argmax(vals))]
        return DeployedOutput((best.agent, best.token))
    return DeployedOutput(tuple(_CUSTOM_RULES[agg.rule](ctx, tuple(proposals))))


def routed_output(candidates: Sequence[Proposal], selected: int) -> DeployedOutput:
    c = candidates[selected]
    return DeployedOutput((c.agent, c.token))


# -- allocation ------------------------------------------------------------------

ALLOCATION_KINDS = ("selected-indicator", "uniform-share")


@dataclass(frozen=True)
class AllocationRule:
    kind: str

    def __post_init__(self):
        if self.kind not in ALLOCATION_KINDS:
            raise ConfigError(f"allocation kind must be one of {ALLOCATION_KINDS}")


def allocation(rule: AllocationRule, K: int, selected: Optional[int] = None) -> np.ndarray:
    if rule.kind == "uniform-share":
        return np.full(K, 1.0 / K)
    if selected is None:
        raise UsageError("selected-indicator allocation needs the selected index")
    if not 0 <= selected < K:
        raise ConfigError(f"selected index {selected} out of range for K={K}")
    out = np.zeros(K)
    out[selected] = 1.0
    return out


# -- logging map ------------------------------------------------------------------

@dataclass(frozen=True, slots=True)
class LoggedObservation:
    """Selection-gated record: only the deployed candidate's return is kept.

    Slots plus ``frozen`` mean no field for unselected rewards exists and none
    can be attached after construction.
    """

    ctx: Context
    candidates: tuple
    selected: int
    propensities: tuple
    observed_return: float
    mech_seed: int
    turn: int = 0

    def __post_init__(self):
        K = len(self.candidates)
        if not 0 <= self.selected < K:
            raise ConfigError(f"selected index {self.selected} outside [0, {K})")
        if len(self.propensities) != K:
            raise ConfigError("need one propensity per candidate")
        if abs(sum(self.propensities) - 1.0) > 1e-9:
            raise ConfigError("propensities must sum to 1")

    @property
    def K(self) -> int:
        return len(self.candidates)

    def to_record(self) -> dict:
        return {
            "schema_version": LOG_SCHEMA_VERSION,
            "ctx": {"id": self.ctx.id, "features": [float(f) for f in self.ctx.features]},
            "candidates": [[c.agent, c.token] for c in self.candidates],
            "selected": self.selected,
            "propensities": list(self.propensities),
            "observed_return": self.observed_return,
            "mech_seed": self.mech_seed,
            "turn": self.turn,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "LoggedObservation":
        version = rec.get("schema_version")
        if version != LOG_SCHEMA_VERSION:
            raise ConfigError(f"unsupported log schema version {version!r}")
        ctx = Context(int(rec["ctx"]["id"]), np.array(rec["ctx"]["features"], dtype=float))
        return cls(
            ctx=ctx,
            candidates=tuple(Proposal(int(a), int(t)) for a, t in rec["candidates"]),
            selected=int(rec["selected"]),
            propensities=tuple(float(p) for p in rec["propensities"]),
            observed_return=float(rec["observed_return"]),
            mech_seed=int(rec["mech_seed"]),
            turn=int(rec["turn"]),
        )


def log_observation(
    ctx: Context,
    candidates: Sequence[Proposal],
    propensities: Iterable[float],
    selected: int,
    observed_return: float,
    mech_seed: int,
    turn: int = 0,
) -> LoggedObservation:
    features = np.array(ctx.features, dtype=float)
    features.setflags(write=False)
    return LoggedObservation(
        ctx=Context(ctx.id, features),
        candidates=tuple(candidates),
        selected=int(selected),
        propensities=tuple(float(p) for p in propensities),
        observed_return=float(observed_return),
        mech_seed=int(mech_seed),
        turn=int(turn),
    )


def write_log(observations: Iterable[LoggedObservation], path: str | Path) -> None:
    with open(path, "w") as fh:
        for obs in observations:
            fh.write(json.dumps(obs.to_record()) + "\n")


def read_log(path: str | Path) -> list:
    with open(path) as fh:
        return [LoggedObservation.from_record(json.loads(line)) for line in fh if line.strip()]
